//! Command-line surface: corpus generation, pre-training, fine-tuning,
//! retrieval evaluation, the objective ablation, and the transfer
//! experiment.
//!
//! Exit codes: 0 success, 1 flag/usage errors (usage text on stderr, nothing
//! on stdout), 2 data/format/config errors, 3 numeric errors. Progress and
//! logs go to stderr; machine-readable output goes only to `--out` files.

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use mmpivot_core::corpus::{generate_synthetic_corpus, load_manifest, CorpusManifest, Split, SyntheticSpec};
use mmpivot_core::eval::{evaluate_all, EvalSettings};
use mmpivot_core::pipeline::{run_ablation, run_transfer_experiment};
use mmpivot_core::trainer::{
    finetune, load_checkpoint, pretrain, save_checkpoint, TrainConfig, TrainMode,
};
use mmpivot_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "mmpivot",
    version,
    about = "Contrastive text-video embedding training and cross-lingual retrieval at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ReportFormat {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus from a spec file.
    #[command(name = "gen-corpus")]
    GenCorpus {
        /// Spec JSON (languages, concepts, split sizes, noise, ...).
        #[arg(long, value_name = "json")]
        spec: PathBuf,
        /// Output corpus directory.
        #[arg(long, value_name = "dir")]
        out: PathBuf,
        /// Generation seed; overrides any seed in the spec file.
        #[arg(long)]
        seed: u64,
    },
    /// Pre-train on the pretrain split with single-language clips.
    Pretrain {
        #[arg(long, value_name = "dir")]
        corpus: PathBuf,
        /// Training config JSON; mode is forced to pretrain.
        #[arg(long, value_name = "json")]
        config: PathBuf,
        /// Comma-separated language pool, or "all".
        #[arg(long, value_name = "csv|all")]
        langs: String,
        /// Checkpoint file to write.
        #[arg(long, value_name = "ckpt")]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Fine-tune on the train split, optionally from a checkpoint.
    Finetune {
        #[arg(long, value_name = "dir")]
        corpus: PathBuf,
        /// Training config JSON; mode is forced to finetune.
        #[arg(long, value_name = "json")]
        config: PathBuf,
        /// Comma-separated caption languages, or "all".
        #[arg(long, value_name = "csv")]
        langs: String,
        /// Starting checkpoint; omitted means training from scratch.
        #[arg(long, value_name = "ckpt")]
        init: Option<PathBuf>,
        /// Checkpoint file to write.
        #[arg(long, value_name = "ckpt")]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
    },
    /// Evaluate text-to-video retrieval for a checkpoint.
    Eval {
        #[arg(long, value_name = "dir")]
        corpus: PathBuf,
        #[arg(long, value_name = "ckpt")]
        ckpt: PathBuf,
        /// Comma-separated query languages, or "all".
        #[arg(long, value_name = "csv|all")]
        langs: String,
        /// Candidate pool size (the first N split videos by id).
        #[arg(long, value_name = "int")]
        pool_size: usize,
        /// Split to evaluate: pretrain, train, val, or test.
        #[arg(long, value_name = "split")]
        split: String,
        /// Report format.
        #[arg(long, value_enum)]
        format: ReportFormat,
        /// Report file to write.
        #[arg(long, value_name = "path")]
        out: PathBuf,
    },
    /// Compare training objectives; one CSV row per objective.
    Ablate {
        #[arg(long, value_name = "dir")]
        corpus: PathBuf,
        /// Comma-separated objective tags, e.g. nce,nce+intra,triplet.
        #[arg(long, value_name = "csv")]
        objectives: String,
        #[arg(long, value_name = "json")]
        config: PathBuf,
        /// CSV file to write.
        #[arg(long, value_name = "csv")]
        out: PathBuf,
    },
    /// Run the four-regime transfer comparison over paired seeds.
    Transfer {
        #[arg(long, value_name = "dir")]
        corpus: PathBuf,
        #[arg(long, value_name = "json")]
        config: PathBuf,
        /// Comma-separated seeds; regimes share each seed, so rows are paired.
        #[arg(long, value_name = "csv")]
        seeds: String,
        /// CSV file to write.
        #[arg(long, value_name = "csv")]
        out: PathBuf,
    },
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Parses a config file without validating; the subcommand forces mode,
/// languages, and seed before validation so one file can serve both phases.
fn read_config(path: &Path) -> Result<TrainConfig> {
    serde_json::from_str(&read_text(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// "all" means every corpus language; otherwise a comma-separated list of
/// names that must all exist in the manifest.
fn parse_langs(manifest: &CorpusManifest, s: &str) -> Result<Vec<String>> {
    if s == "all" {
        return Ok(manifest.languages.clone());
    }
    s.split(',')
        .map(|raw| {
            let name = raw.trim();
            if manifest.language_index(name).is_none() {
                return Err(Error::Config(format!(
                    "language {name:?} is not in the corpus (has: {})",
                    manifest.languages.join(", ")
                )));
            }
            Ok(name.to_string())
        })
        .collect()
}

fn load_corpus(root: &Path) -> Result<(CorpusManifest, Vec<mmpivot_core::encoder::VideoFeatureSequence>)> {
    let manifest = load_manifest(root)?;
    let features = manifest.load_all_features()?;
    Ok((manifest, features))
}

fn write_out(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenCorpus { spec, out, seed } => {
            let mut sspec: SyntheticSpec = serde_json::from_str(&read_text(&spec)?)
                .map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            sspec.seed = seed;
            let manifest = generate_synthetic_corpus(&sspec, &out)?;
            eprintln!(
                "generated {} videos, {} languages, vocab {} under {}",
                manifest.videos.len(),
                manifest.languages.len(),
                manifest.vocab.size(),
                out.display()
            );
        }
        Command::Pretrain { corpus, config, langs, out, seed } => {
            let (manifest, features) = load_corpus(&corpus)?;
            let mut cfg = read_config(&config)?;
            cfg.mode = TrainMode::Pretrain;
            cfg.cross = false;
            cfg.language_pool = parse_langs(&manifest, &langs)?;
            cfg.seed = seed;
            cfg.validate()?;
            let run = pretrain(&manifest, &features, &cfg)?;
            save_checkpoint(&run.model, &cfg, run.steps, &out)?;
            eprintln!("wrote checkpoint {}", out.display());
        }
        Command::Finetune { corpus, config, langs, init, out, seed } => {
            let (manifest, features) = load_corpus(&corpus)?;
            let mut cfg = read_config(&config)?;
            cfg.mode = TrainMode::Finetune;
            cfg.language_pool = parse_langs(&manifest, &langs)?;
            cfg.seed = seed;
            cfg.validate()?;
            let start = match init {
                Some(path) => Some(load_checkpoint(&path)?.model),
                None => None,
            };
            let run = finetune(start, &manifest, &features, &cfg)?;
            save_checkpoint(&run.model, &cfg, run.steps, &out)?;
            eprintln!("wrote checkpoint {}", out.display());
        }
        Command::Eval { corpus, ckpt, langs, pool_size, split, format, out } => {
            let (manifest, features) = load_corpus(&corpus)?;
            let checkpoint = load_checkpoint(&ckpt)?;
            let names = parse_langs(&manifest, &langs)?;
            let indices: Vec<usize> = names
                .iter()
                .map(|n| manifest.language_index(n).expect("validated above"))
                .collect();
            let split = Split::parse(&split).ok_or_else(|| {
                Error::Config(format!(
                    "unknown split {split:?}; expected pretrain, train, val, or test"
                ))
            })?;
            let settings = EvalSettings {
                split,
                pool_size,
                max_text_len: checkpoint.config.max_text_len,
                max_video_len: checkpoint.config.max_video_len,
            };
            let report = evaluate_all(
                &checkpoint.model,
                &manifest,
                &features,
                &indices,
                &settings,
                &ckpt.display().to_string(),
                checkpoint.seed,
            )?;
            let body = match format {
                ReportFormat::Json => report.to_json()?,
                ReportFormat::Csv => report.to_csv(),
            };
            write_out(&out, &body)?;
        }
        Command::Ablate { corpus, objectives, config, out } => {
            let (manifest, features) = load_corpus(&corpus)?;
            let mut base = read_config(&config)?;
            base.mode = TrainMode::Finetune;
            base.cross = false;
            let tags: Vec<String> =
                objectives.split(',').map(|t| t.trim().to_string()).collect();
            let report = run_ablation(&manifest, &features, &base, &tags)?;
            write_out(&out, &report.to_csv())?;
        }
        Command::Transfer { corpus, config, seeds, out } => {
            let (manifest, features) = load_corpus(&corpus)?;
            let mut base = read_config(&config)?;
            base.mode = TrainMode::Finetune;
            base.cross = false;
            let seeds = seeds
                .split(',')
                .map(|s| {
                    s.trim().parse::<u64>().map_err(|_| {
                        Error::Config(format!("seed {s:?} is not an unsigned integer"))
                    })
                })
                .collect::<Result<Vec<u64>>>()?;
            let report = run_transfer_experiment(&manifest, &features, &base, &seeds)?;
            write_out(&out, &report.to_csv())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
