//! Multi-run experiment drivers shared by the CLI and the test suite: the
//! four-regime transfer comparison and the objective ablation.
//!
//! Both take one flat training config as the base and derive per-run configs
//! from it, so a whole experiment is reproducible from (corpus, config,
//! seeds). The first corpus language plays the role of the supervised
//! language: zero-shot regimes fine-tune on it alone and are then evaluated
//! on every language.

use crate::corpus::CorpusManifest;
use crate::corpus::Split;
use crate::encoder::VideoFeatureSequence;
use crate::error::{Error, Result};
use crate::eval::{evaluate_all, EvalSettings, RetrievalReport};
use crate::objective::{LossBreakdown, ObjectiveKind};
use crate::trainer::{finetune, pretrain, TrainConfig, TrainMode, TrainRun};
use std::fmt::Write as _;

/// Candidate pools larger than this are truncated; the reference protocol
/// evaluates against 100 videos.
pub const EVAL_POOL_CAP: usize = 100;

/// The transfer experiment's regimes, in report row order.
pub const TRANSFER_REGIMES: [&str; 4] = ["scratch", "mp", "mmp", "mmp_all"];

fn eval_settings(manifest: &CorpusManifest, cfg: &TrainConfig) -> Result<EvalSettings> {
    let test = manifest.split_videos(Split::Test).len();
    if test == 0 {
        return Err(Error::Eval("the test split has no videos".into()));
    }
    Ok(EvalSettings {
        split: Split::Test,
        pool_size: test.min(EVAL_POOL_CAP),
        max_text_len: cfg.max_text_len,
        max_video_len: cfg.max_video_len,
    })
}

fn all_languages(manifest: &CorpusManifest) -> Vec<usize> {
    (0..manifest.languages.len()).collect()
}

/// One regime x seed outcome: the full per-language retrieval report.
#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub regime: &'static str,
    pub seed: u64,
    pub report: RetrievalReport,
}

/// Seed-averaged R@1 per language for one regime row.
#[derive(Debug, Clone)]
pub struct TransferRow {
    pub regime: &'static str,
    pub r1: Vec<f64>,
    pub avg: f64,
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub languages: Vec<String>,
    pub rows: Vec<TransferRow>,
    pub outcomes: Vec<TransferOutcome>,
}

impl TransferReport {
    /// `regime,<lang>,...,avg` with seed-averaged R@1 cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("regime");
        for l in &self.languages {
            let _ = write!(out, ",{l}");
        }
        out.push_str(",avg\n");
        for row in &self.rows {
            out.push_str(row.regime);
            for v in &row.r1 {
                let _ = write!(out, ",{v:.6}");
            }
            let _ = writeln!(out, ",{:.6}", row.avg);
        }
        out
    }

    /// Seed-averaged R@1 of one regime in one language.
    pub fn mean_r1(&self, regime: &str, language: &str) -> Option<f64> {
        let li = self.languages.iter().position(|l| l == language)?;
        let row = self.rows.iter().find(|r| r.regime == regime)?;
        row.r1.get(li).copied()
    }
}

fn derived(base: &TrainConfig, mode: TrainMode, pool: &[String], cross: bool, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        cross,
        language_pool: pool.to_vec(),
        seed,
        ..base.clone()
    }
}

/// The Table-4 style comparison. Per seed: fine-tune on the first language
/// from scratch, from an English-only style pre-train (pool = first
/// language), and from a multilingual pre-train (pool = all); plus an
/// all-language fine-tune of the multilingual pre-train with the
/// cross-lingual term. Every run is evaluated on every language over the
/// test split. Rows are seed averages; pairing comes from sharing seeds.
///
/// The config's `epochs` applies to both phases (null picks each mode's
/// default); run the `pretrain` and `finetune` subcommands separately for
/// asymmetric schedules.
pub fn run_transfer_experiment(
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    base: &TrainConfig,
    seeds: &[u64],
) -> Result<TransferReport> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("transfer needs at least one seed".into()));
    }
    if manifest.languages.len() < 2 {
        return Err(Error::Config(
            "the transfer experiment needs at least two corpus languages".into(),
        ));
    }
    let first_lang = vec![manifest.languages[0].clone()];
    let every_lang: Vec<String> = manifest.languages.clone();
    let languages = all_languages(manifest);
    let settings = eval_settings(manifest, base)?;
    let mut outcomes = Vec::new();
    for &seed in seeds {
        let evaluate = |run: &TrainRun, regime: &'static str| -> Result<RetrievalReport> {
            evaluate_all(
                &run.model,
                manifest,
                features,
                &languages,
                &settings,
                &format!("transfer/{regime}"),
                seed,
            )
        };

        eprintln!("transfer seed {seed}: scratch fine-tune");
        let mut scratch_cfg = derived(base, TrainMode::Finetune, &first_lang, false, seed);
        scratch_cfg.freeze_below = 0;
        let scratch = finetune(None, manifest, features, &scratch_cfg)?;
        outcomes.push(TransferOutcome {
            regime: "scratch",
            seed,
            report: evaluate(&scratch, "scratch")?,
        });

        eprintln!("transfer seed {seed}: first-language pre-train");
        let mp_pre = derived(base, TrainMode::Pretrain, &first_lang, false, seed);
        let mp = pretrain(manifest, features, &mp_pre)?;
        eprintln!("transfer seed {seed}: multilingual pre-train");
        let mmp_pre = TrainConfig { language_pool: every_lang.clone(), ..mp_pre.clone() };
        let mmp = pretrain(manifest, features, &mmp_pre)?;

        let ft_zero = derived(base, TrainMode::Finetune, &first_lang, false, seed);
        eprintln!("transfer seed {seed}: zero-shot fine-tune of the first-language pre-train");
        let mp_run = finetune(Some(mp.model), manifest, features, &ft_zero)?;
        outcomes.push(TransferOutcome { regime: "mp", seed, report: evaluate(&mp_run, "mp")? });

        eprintln!("transfer seed {seed}: zero-shot fine-tune of the multilingual pre-train");
        let mmp_run = finetune(Some(mmp.model.clone()), manifest, features, &ft_zero)?;
        outcomes.push(TransferOutcome { regime: "mmp", seed, report: evaluate(&mmp_run, "mmp")? });

        eprintln!("transfer seed {seed}: all-language fine-tune of the multilingual pre-train");
        let ft_all = derived(base, TrainMode::Finetune, &every_lang, true, seed);
        let all_run = finetune(Some(mmp.model), manifest, features, &ft_all)?;
        outcomes.push(TransferOutcome {
            regime: "mmp_all",
            seed,
            report: evaluate(&all_run, "mmp_all")?,
        });
    }

    let n_seeds = seeds.len() as f64;
    let rows = TRANSFER_REGIMES
        .iter()
        .map(|&regime| {
            let r1: Vec<f64> = (0..manifest.languages.len())
                .map(|li| {
                    outcomes
                        .iter()
                        .filter(|o| o.regime == regime)
                        .map(|o| o.report.rows[li].r1)
                        .sum::<f64>()
                        / n_seeds
                })
                .collect();
            let avg = r1.iter().sum::<f64>() / r1.len() as f64;
            TransferRow { regime, r1, avg }
        })
        .collect();
    Ok(TransferReport { languages: manifest.languages.clone(), rows, outcomes })
}

/// Objective tags accepted by the ablation, mirroring the comparison table.
pub const ABLATION_TAGS: [&str; 5] =
    ["triplet", "triplet+intra", "nce", "nce+intra", "nce+intra+cross"];

fn parse_objective_tag(tag: &str) -> Result<(ObjectiveKind, bool, bool)> {
    match tag {
        "triplet" => Ok((ObjectiveKind::Triplet, false, false)),
        "triplet+intra" => Ok((ObjectiveKind::Triplet, true, false)),
        "nce" => Ok((ObjectiveKind::Nce, false, false)),
        "nce+intra" => Ok((ObjectiveKind::Nce, true, false)),
        "nce+intra+cross" => Ok((ObjectiveKind::Nce, true, true)),
        other => Err(Error::Config(format!(
            "unknown objective {other:?}; expected one of {}",
            ABLATION_TAGS.join(", ")
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub objective: String,
    /// Mean loss components of the final training epoch.
    pub loss: LossBreakdown,
    /// Test recalls averaged over corpus languages.
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
}

#[derive(Debug, Clone)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// One row per objective; the cross column is empty when the objective
    /// has no cross-lingual term.
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("objective,loss_inter,loss_intra,loss_cross,loss_total,r1,r5,r10\n");
        for row in &self.rows {
            let cross = match row.loss.cross {
                Some(c) => format!("{c:.6}"),
                None => String::new(),
            };
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{cross},{:.6},{:.6},{:.6},{:.6}",
                row.objective, row.loss.inter, row.loss.intra, row.loss.total, row.r1, row.r5,
                row.r10
            );
        }
        out
    }
}

/// Trains one fine-tune from scratch per objective tag on every corpus
/// language and reports final losses plus test retrieval, all under the
/// base config's seed so rows differ only in their objective.
pub fn run_ablation(
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    base: &TrainConfig,
    objectives: &[String],
) -> Result<AblationReport> {
    base.validate()?;
    if objectives.is_empty() {
        return Err(Error::Config("ablate needs at least one objective".into()));
    }
    let parsed = objectives
        .iter()
        .map(|t| Ok((t.clone(), parse_objective_tag(t)?)))
        .collect::<Result<Vec<_>>>()?;
    let every_lang: Vec<String> = manifest.languages.clone();
    let languages = all_languages(manifest);
    let settings = eval_settings(manifest, base)?;
    let mut rows = Vec::new();
    for (tag, (objective, intra, cross)) in parsed {
        eprintln!("ablation: objective {tag}");
        let cfg = TrainConfig {
            objective,
            intra,
            ..derived(base, TrainMode::Finetune, &every_lang, cross, base.seed)
        };
        let run = finetune(None, manifest, features, &cfg)?;
        let loss = *run
            .epoch_losses
            .last()
            .ok_or_else(|| Error::Config("ablation run produced no epochs".into()))?;
        let report = evaluate_all(
            &run.model,
            manifest,
            features,
            &languages,
            &settings,
            &format!("ablate/{tag}"),
            base.seed,
        )?;
        rows.push(AblationRow {
            objective: tag,
            loss,
            r1: report.avg_r1,
            r5: report.avg_r5,
            r10: report.avg_r10,
        });
    }
    Ok(AblationReport { rows })
}
