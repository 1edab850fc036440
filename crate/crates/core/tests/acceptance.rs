//! End-to-end acceptance checks, one per shipped guarantee: gradient
//! correctness of the full loss compositions, loss values against an
//! independent oracle, retrieval accounting against a brute-force ranker,
//! trainability, the multilingual pre-training transfer effect, the
//! translate-train comparison, the objective ablation, and bitwise
//! reproducibility of whole pipelines.
//!
//! Each check prints exactly one PASS or FAIL line with its wall time, and
//! the process exits nonzero if any check fails. Checks that run training
//! also enforce a wall-clock budget, so a passing suite doubles as a
//! performance floor. Everything is seeded; a pass is a pass on every rerun.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use mmpivot_core::corpus::{
    assemble_batch, generate_synthetic_corpus, BatchItem, BatchMode, CorpusManifest, Split,
    SplitCounts, SyntheticSpec,
};
use mmpivot_core::encoder::{
    bind_model, ModelParameters, TokenSequence, VideoFeatureSequence,
};
use mmpivot_core::eval::{evaluate_language, EvalSettings};
use mmpivot_core::gradcheck;
use mmpivot_core::graph::Graph;
use mmpivot_core::objective::{
    self, total_loss, LossOptions, ObjectiveKind,
};
use mmpivot_core::optim::AdamState;
use mmpivot_core::pipeline::{
    run_ablation, run_transfer_experiment, TransferReport, ABLATION_TAGS,
};
use mmpivot_core::rng::Rng;
use mmpivot_core::tensor::ParamId;
use mmpivot_core::trainer::{encode_batch, train_step, TrainConfig, TrainMode};

/// Worst allowed relative disagreement between analytic and central
/// finite-difference gradients over full forward/backward compositions.
const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
/// Step grid for coordinates that miss the tolerance at the default step.
/// A genuine gradient bug disagrees at every step size; an artifact does
/// not: round-off dominates small-gradient coordinates at small steps, a
/// rectifier kink inside the difference interval dominates at large ones,
/// and coordinates feeding the temperature-scaled exponentials can carry
/// enough curvature that truncation needs a much smaller step. Each
/// coordinate keeps its best step's error.
const GRAD_FD_STEPS: [f64; 4] = [1e-5, 1e-6, 1e-7, 4e-5];

/// Allowed absolute disagreement between the graph contrastive loss and a
/// direct-summation reimplementation.
const NCE_TOL: f64 = 1e-10;
const NCE_CASES: usize = 100;
/// Identity similarities, batch of two, unit temperature.
const NCE_IDENTITY: f64 = 0.551444;
const NCE_IDENTITY_TOL: f64 = 1e-6;

/// Memorization check: train-split R@1 must reach 1.0 within this many
/// optimizer steps on a 32-pair corpus, for most seeds.
const OVERFIT_STEP_CAP: usize = 300;
const OVERFIT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const OVERFIT_MIN_PASSES: usize = 4;

/// Transfer margins in absolute R@1 on the held-out language.
const TRANSFER_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const TRANSFER_GAP_MIN: f64 = 0.05;
const TRANSFER_EN_DIFF_MAX: f64 = 0.10;
const TRANSLATE_TRAIN_SLACK: f64 = 0.02;

/// Wall-clock budgets in seconds, enforced on the PASS path.
const BUDGET_GRAD: f64 = 60.0;
const BUDGET_NCE: f64 = 10.0;
const BUDGET_RETRIEVAL: f64 = 60.0;
const BUDGET_OVERFIT: f64 = 120.0;
const BUDGET_TRANSFER: f64 = 600.0;

type CheckResult = std::result::Result<String, String>;

trait OrFail<T> {
    fn or_fail(self) -> std::result::Result<T, String>;
}

impl<T> OrFail<T> for mmpivot_core::Result<T> {
    fn or_fail(self) -> std::result::Result<T, String> {
        self.map_err(|e| e.to_string())
    }
}

fn run_check(
    idx: usize,
    name: &str,
    budget: Option<f64>,
    failed: &mut usize,
    f: impl FnOnce() -> CheckResult,
) {
    let t0 = Instant::now();
    let outcome = f();
    let dt = t0.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => match budget {
            Some(b) if dt > b => {
                println!("[{idx}/8] {name:<18} FAIL ({dt:.1}s) over the {b:.0}s budget; {detail}");
                *failed += 1;
            }
            _ => println!("[{idx}/8] {name:<18} PASS ({dt:.1}s) {detail}"),
        },
        Err(why) => {
            println!("[{idx}/8] {name:<18} FAIL ({dt:.1}s) {why}");
            *failed += 1;
        }
    }
}

fn main() -> ExitCode {
    let tmp = match tempfile::tempdir() {
        Ok(d) => d,
        Err(e) => {
            eprintln!("acceptance: cannot create a scratch directory: {e}");
            return ExitCode::FAILURE;
        }
    };
    let mut failed = 0usize;
    let mut overfit_csv = String::new();
    let mut transfer_report: Option<TransferReport> = None;

    run_check(1, "gradient-check", Some(BUDGET_GRAD), &mut failed, check_gradients);
    run_check(2, "nce-oracle", Some(BUDGET_NCE), &mut failed, check_nce_oracle);
    run_check(3, "retrieval-oracle", Some(BUDGET_RETRIEVAL), &mut failed, || {
        check_retrieval_oracle(&tmp.path().join("retrieval"))
    });
    run_check(4, "english-overfit", Some(BUDGET_OVERFIT), &mut failed, || {
        let (detail, csv) = check_overfit(&tmp.path().join("overfit-a"))?;
        overfit_csv = csv;
        Ok(detail)
    });
    run_check(5, "pretrain-transfer", Some(BUDGET_TRANSFER), &mut failed, || {
        let report = transfer_run(&tmp.path().join("transfer-a"))?;
        let detail = check_transfer_gap(&report)?;
        transfer_report = Some(report);
        Ok(detail)
    });
    run_check(6, "translate-train", None, &mut failed, || match &transfer_report {
        Some(report) => check_translate_train(report),
        None => Err("skipped: the transfer run did not produce a report".into()),
    });
    run_check(7, "objective-ablation", None, &mut failed, || {
        check_ablation(&tmp.path().join("ablation"))
    });
    run_check(8, "bitwise-rerun", None, &mut failed, || {
        check_rerun(tmp.path(), &overfit_csv, transfer_report.as_ref())
    });

    if failed == 0 {
        println!("acceptance: all 8 checks passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 8 checks failed");
        ExitCode::FAILURE
    }
}

// --- check 1: analytic gradients vs central finite differences ------------

/// A two-item pivoted batch with random tokens and features, sized for the
/// tiny gradient-check model. `salt` redraws the batch when a hinge sits too
/// close to zero for finite differences to make sense.
fn tiny_batch(vocab_size: usize, feature_dim: usize, seed: u64, salt: u64) -> mmpivot_core::Result<Vec<BatchItem>> {
    let mut r = Rng::stream(seed, &format!("acceptance/grad/batch/{salt}"));
    let mut batch = Vec::new();
    for i in 0..2 {
        let mut toks = |lang: usize| -> TokenSequence {
            let len = 3 + r.below(3);
            TokenSequence {
                language: lang,
                tokens: (0..len).map(|_| 2 + r.below(vocab_size - 2)).collect(),
            }
        };
        let text = toks(0);
        let second = toks(1);
        let rows = 2 + r.below(3);
        let data: Vec<f64> = (0..rows * feature_dim).map(|_| r.range(-1.0, 1.0)).collect();
        batch.push(BatchItem {
            video_idx: i,
            t0: 0.0,
            t1: rows as f64,
            text,
            features: VideoFeatureSequence::new(rows, feature_dim, data)?,
            second_text: Some(second),
        });
    }
    Ok(batch)
}

/// True when any triplet hinge of the two inter-modal similarity matrices is
/// within `guard` of its kink, where a two-sided difference straddles the
/// non-differentiable point.
fn near_hinge(
    model: &ModelParameters,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    guard: f64,
) -> mmpivot_core::Result<bool> {
    let mut g = Graph::new();
    let bm = bind_model(&mut g, model)?;
    let enc = encode_batch(&mut g, &bm, batch, cfg, 0, true)?;
    let mut sims = Vec::new();
    sims.push(objective::similarity_matrix(&mut g, enc.text, enc.video)?);
    if let Some(cy) = enc.text_y {
        sims.push(objective::similarity_matrix(&mut g, cy, enc.video)?);
    }
    for s in sims {
        let b = g.shape(s)[0];
        let d = g.value(s).to_vec();
        for i in 0..b {
            for j in 0..b {
                if j == i {
                    continue;
                }
                let row = cfg.margin - d[i * b + i] + d[i * b + j];
                let col = cfg.margin - d[i * b + i] + d[j * b + i];
                if row.abs() < guard || col.abs() < guard {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

fn check_gradients() -> CheckResult {
    let vocab_size = 13;
    let feature_dim = 5;
    let mut worst = 0.0f64;
    for seed in 0..GRAD_SEEDS {
        // Alternate loss families so both get full-composition coverage.
        let objective = if seed % 2 == 0 { ObjectiveKind::Nce } else { ObjectiveKind::Triplet };
        let cfg = TrainConfig {
            mode: TrainMode::Finetune,
            objective,
            intra: true,
            cross: true,
            dropout: 0.15,
            seed,
            embed_dim: 8,
            backbone_layers: 2,
            backbone_heads: 2,
            pool_layers: 1,
            pool_heads: 2,
            max_text_len: 6,
            ..TrainConfig::default()
        };
        let dims = cfg.model_dims(vocab_size, feature_dim);
        let opts = LossOptions {
            objective,
            tau: cfg.tau,
            margin: cfg.margin,
            intra: true,
            cross: true,
            multilingual: true,
        };

        let mut salt = 0u64;
        let (mut model, batch) = loop {
            let model = ModelParameters::init(&dims, 0, 1000 + seed).or_fail()?;
            let batch = tiny_batch(vocab_size, feature_dim, seed, salt).or_fail()?;
            if objective == ObjectiveKind::Triplet
                && near_hinge(&model, &batch, &cfg, 1e-3).or_fail()?
            {
                salt += 1;
                if salt > 8 {
                    return Err(format!("seed {seed}: no hinge-safe batch in 8 draws"));
                }
                continue;
            }
            break (model, batch);
        };

        // Analytic pass over the full composition.
        model.store.zero_grads();
        let breakdown_total;
        {
            let mut g = Graph::new();
            let bm = bind_model(&mut g, &model).or_fail()?;
            let enc = encode_batch(&mut g, &bm, &batch, &cfg, 0, true).or_fail()?;
            let (loss, breakdown) = total_loss(&mut g, &enc, &opts).or_fail()?;
            breakdown_total = breakdown.total;
            g.backward(loss).or_fail()?;
            g.harvest_grads(&mut model.store).or_fail()?;
        }
        if !breakdown_total.is_finite() {
            return Err(format!("seed {seed}: non-finite loss {breakdown_total}"));
        }
        let grads: HashMap<ParamId, Vec<f64>> = model
            .store
            .iter()
            .map(|(id, _, t)| (id, t.grad.clone().unwrap_or_else(|| vec![0.0; t.numel()])))
            .collect();

        // One or two random coordinates per parameter block covers every
        // operation the block feeds: embeddings, attention, layer norms,
        // feed-forwards, projections, pooling, and both loss families.
        let mut coords = Vec::new();
        let mut cr = Rng::stream(seed, "acceptance/grad/coords");
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let n = model.store.get(id).numel();
            coords.push((id, cr.below(n)));
            if n > 4 {
                coords.push((id, cr.below(n)));
            }
        }

        let template = model.clone();
        let forward = |store: &mmpivot_core::tensor::ParamStore| -> mmpivot_core::Result<f64> {
            let mut m = template.clone();
            m.store = store.clone();
            let mut g = Graph::new();
            let bm = bind_model(&mut g, &m)?;
            let enc = encode_batch(&mut g, &bm, &batch, &cfg, 0, true)?;
            let (loss, _) = total_loss(&mut g, &enc, &opts)?;
            Ok(g.scalar_value(loss))
        };
        let mut err = 0.0f64;
        for &(id, coord) in &coords {
            let mut best = f64::INFINITY;
            let mut last_numeric = f64::NAN;
            for &step in &GRAD_FD_STEPS {
                let numeric =
                    gradcheck::numeric_partial(&mut model.store, id, coord, step, &forward)
                        .or_fail()?;
                let rel = gradcheck::rel_error(grads[&id][coord], numeric);
                if rel < best {
                    best = rel;
                    last_numeric = numeric;
                }
                if best <= GRAD_TOL {
                    break;
                }
            }
            if best > GRAD_TOL {
                return Err(format!(
                    "seed {seed} ({objective:?}): {}[{coord}] analytic {:.9e} vs numeric {:.9e}, rel {best:.3e}",
                    model.store.name(id),
                    grads[&id][coord],
                    last_numeric,
                ));
            }
            err = err.max(best);
        }
        worst = worst.max(err);
    }
    Ok(format!(
        "max relative error {worst:.2e} over {GRAD_SEEDS} seeded compositions (tol {GRAD_TOL:.0e})"
    ))
}

// --- check 2: contrastive loss vs a direct-summation oracle ---------------

/// Literal transcription of the pooled bidirectional objective: each anchor
/// competes against its own pair plus both off-diagonal directions, summed
/// directly in f64 with no log-sum-exp rearrangement.
fn oracle_nce(s: &[Vec<f64>], tau: f64) -> f64 {
    let b = s.len();
    let mut acc = 0.0;
    for i in 0..b {
        let pos = (s[i][i] / tau).exp();
        let mut denom = pos;
        for j in 0..b {
            if j != i {
                denom += (s[i][j] / tau).exp() + (s[j][i] / tau).exp();
            }
        }
        acc += (pos / denom).ln();
    }
    -acc / b as f64
}

fn graph_nce(s: &[Vec<f64>], tau: f64) -> mmpivot_core::Result<f64> {
    let b = s.len();
    let flat: Vec<f64> = s.iter().flatten().copied().collect();
    let mut g = Graph::new();
    let sim = g.leaf(&[b, b], flat)?;
    let loss = objective::nce_batch_loss(&mut g, sim, tau)?;
    Ok(g.scalar_value(loss))
}

fn check_nce_oracle() -> CheckResult {
    let mut worst = 0.0f64;
    for case in 0..NCE_CASES {
        let b = 1 + case % 4;
        let tau = if case % 2 == 0 { 1.0 } else { 0.1 };
        let mut r = Rng::stream(90, &format!("acceptance/nce/{case}"));
        let s: Vec<Vec<f64>> =
            (0..b).map(|_| (0..b).map(|_| r.range(-1.0, 1.0)).collect()).collect();
        let got = graph_nce(&s, tau).or_fail()?;
        let want = oracle_nce(&s, tau);
        let diff = (got - want).abs();
        if diff > NCE_TOL {
            return Err(format!(
                "case {case} (B={b}, tau={tau}): graph {got:.15} vs oracle {want:.15}, |diff| {diff:.3e}"
            ));
        }
        worst = worst.max(diff);
    }

    // Identity similarities at unit temperature have a closed form:
    // ln(e + 2) - 1 per anchor.
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let got = graph_nce(&eye, 1.0).or_fail()?;
    let exact = (std::f64::consts::E + 2.0).ln() - 1.0;
    if (got - exact).abs() > 1e-12 {
        return Err(format!("identity case: graph {got:.15} vs closed form {exact:.15}"));
    }
    if (got - NCE_IDENTITY).abs() > NCE_IDENTITY_TOL {
        return Err(format!(
            "identity case: {got:.9} not within {NCE_IDENTITY_TOL:.0e} of {NCE_IDENTITY}"
        ));
    }
    Ok(format!(
        "{NCE_CASES} random batches within {NCE_TOL:.0e} of the oracle; identity batch = {got:.6}"
    ))
}

// --- check 3: recall accounting vs a brute-force ranker --------------------

/// Same protocol as the library evaluator (first pool-size test videos by
/// sorted id, first caption per query, truncation limits), but ranks by
/// materializing the full query-by-pool similarity matrix and counting.
fn oracle_recalls(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    language: usize,
    settings: &EvalSettings,
) -> mmpivot_core::Result<(f64, f64, f64)> {
    let ids = manifest.split_videos(settings.split);
    let pool: Vec<usize> = ids[..settings.pool_size].to_vec();
    let mut enc = Vec::with_capacity(pool.len());
    for &vi in &pool {
        enc.push(model.infer_video(&features[vi].truncated(settings.max_video_len))?);
    }
    let mut ranks = Vec::with_capacity(pool.len());
    for (qi, &vi) in pool.iter().enumerate() {
        let segs = manifest.segments(vi, language);
        let mut tokens = segs[0].tokens.clone();
        tokens.truncate(settings.max_text_len);
        let q = model.infer_text(&TokenSequence { language, tokens })?;
        let sims: Vec<f64> = enc
            .iter()
            .map(|p| objective::cosine_similarity(&q, p))
            .collect::<mmpivot_core::Result<_>>()?;
        let own = sims[qi];
        let mut rank = 1usize;
        for (j, &s) in sims.iter().enumerate() {
            if j != qi && (s > own || (s == own && j < qi)) {
                rank += 1;
            }
        }
        ranks.push(rank);
    }
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64;
    Ok((recall(1), recall(5), recall(10)))
}

fn check_retrieval_oracle(dir: &Path) -> CheckResult {
    let spec = SyntheticSpec {
        videos: SplitCounts { pretrain: 0, train: 0, val: 0, test: 256 },
        seed: 11,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic_corpus(&spec, dir).or_fail()?;
    let features = manifest.load_all_features().or_fail()?;
    let cfg = TrainConfig { embed_dim: 32, max_text_len: 16, ..TrainConfig::default() };
    let dims = cfg.model_dims(manifest.vocab.size(), manifest.feature_dim);
    let model = ModelParameters::init(&dims, 0, 999).or_fail()?;

    for pool_size in [10usize, 100, 256] {
        let settings = EvalSettings {
            split: Split::Test,
            pool_size,
            max_text_len: 16,
            max_video_len: 12,
        };
        for language in 0..manifest.languages.len() {
            let got = evaluate_language(&model, &manifest, &features, language, &settings)
                .or_fail()?;
            let want = oracle_recalls(&model, &manifest, &features, language, &settings)
                .or_fail()?;
            if got != want {
                return Err(format!(
                    "pool {pool_size}, language {}: evaluator {got:?} != oracle {want:?}",
                    manifest.languages[language]
                ));
            }
            if !(got.0 <= got.1 && got.1 <= got.2) {
                return Err(format!("pool {pool_size}: recalls not monotone: {got:?}"));
            }
        }
    }

    // Untrained models should sit at chance. Mean R@1 over 20 inits and a
    // 100-video pool is 2000 near-Bernoulli(1/100) trials; allow three
    // binomial sigmas around 1/100.
    let n_seeds = 20u64;
    let pool_size = 100usize;
    let settings =
        EvalSettings { split: Split::Test, pool_size, max_text_len: 16, max_video_len: 12 };
    let mut mean = 0.0;
    for s in 0..n_seeds {
        let m = ModelParameters::init(&dims, 0, 2000 + s).or_fail()?;
        let (r1, r5, r10) = evaluate_language(&m, &manifest, &features, 0, &settings).or_fail()?;
        if !(0.0..=1.0).contains(&r1) || !(r1 <= r5 && r5 <= r10) {
            return Err(format!("seed {s}: malformed recalls ({r1}, {r5}, {r10})"));
        }
        mean += r1;
    }
    mean /= n_seeds as f64;
    let chance = 1.0 / pool_size as f64;
    let trials = (n_seeds as usize * pool_size) as f64;
    let band = 3.0 * (chance * (1.0 - chance) / trials).sqrt();
    if (mean - chance).abs() > band {
        return Err(format!(
            "untrained mean R@1 {mean:.4} outside {chance:.3} +/- {band:.4}"
        ));
    }
    Ok(format!(
        "exact recall match at pools 10/100/256; untrained R@1 {mean:.4} within 3 sigma of chance"
    ))
}

// --- check 4: memorizing 32 English pairs ----------------------------------

/// Single-segment videos of 4 to 8 seconds: together with a minimum clip
/// length of 8 the sampler always takes the whole video, so every epoch
/// trains on exactly the pairs the evaluation ranks and the check isolates
/// memorization from view sampling.
fn overfit_corpus(dir: &Path) -> mmpivot_core::Result<(CorpusManifest, Vec<VideoFeatureSequence>)> {
    let spec = SyntheticSpec {
        languages: vec!["en".into()],
        videos: SplitCounts { pretrain: 0, train: 32, val: 0, test: 0 },
        segments_per_video: [1, 1],
        distractor_prob: 0.0,
        seed: 21,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic_corpus(&spec, dir)?;
    let features = manifest.load_all_features()?;
    Ok((manifest, features))
}

/// Trains on the 32 pairs and reports the first step count at which
/// train-split R@1 reaches 1.0, or None within the step cap.
fn overfit_one_seed(
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    seed: u64,
) -> mmpivot_core::Result<(Option<usize>, f64)> {
    let cfg = TrainConfig {
        mode: TrainMode::Finetune,
        objective: ObjectiveKind::Nce,
        intra: false,
        cross: false,
        language_pool: vec!["en".into()],
        learning_rate: 1e-2,
        max_grad_norm: 5.0,
        dropout: 0.0,
        batch_size: 32,
        embed_dim: 32,
        max_text_len: 16,
        max_video_len: 12,
        min_clip_sec: 8.0,
        max_clip_sec: 10.0,
        seed,
        ..TrainConfig::default()
    };
    let dims = cfg.model_dims(manifest.vocab.size(), manifest.feature_dim);
    let mut model = ModelParameters::init(&dims, 0, seed)?;
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let train = manifest.split_videos(Split::Train);
    let pool_langs = vec![0usize];
    let settings = EvalSettings {
        split: Split::Train,
        pool_size: train.len(),
        max_text_len: cfg.max_text_len,
        max_video_len: cfg.max_video_len,
    };

    let mut step = 0usize;
    let mut last_r1 = 0.0;
    for epoch in 0.. {
        if step >= OVERFIT_STEP_CAP {
            break;
        }
        let mut order = train.clone();
        Rng::stream(seed, &format!("acceptance/overfit/shuffle/e{epoch}")).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(
                manifest,
                features,
                chunk,
                BatchMode::Single,
                &pool_langs,
                cfg.min_clip_sec,
                cfg.max_clip_sec,
                cfg.max_text_len,
                cfg.max_video_len,
                cfg.seed,
                epoch,
            )?;
            train_step(&mut model, &mut adam, &batch, &cfg, step)?;
            step += 1;
        }
        let (r1, _, _) = evaluate_language(&model, manifest, features, 0, &settings)?;
        last_r1 = r1;
        if r1 == 1.0 {
            return Ok((Some(step), r1));
        }
    }
    Ok((None, last_r1))
}

/// Returns the PASS detail plus a CSV of per-seed outcomes; the CSV feeds
/// the reproducibility check.
fn check_overfit(dir: &Path) -> std::result::Result<(String, String), String> {
    let (manifest, features) = overfit_corpus(dir).or_fail()?;
    let mut csv = String::from("seed,steps_to_perfect,final_r1\n");
    let mut passes = 0usize;
    let mut fastest: Option<usize> = None;
    for &seed in &OVERFIT_SEEDS {
        let (hit, r1) = overfit_one_seed(&manifest, &features, seed).or_fail()?;
        let steps = hit.map(|s| s.to_string()).unwrap_or_default();
        let _ = writeln!(csv, "{seed},{steps},{r1:.6}");
        if let Some(s) = hit {
            passes += 1;
            fastest = Some(fastest.map_or(s, |f| f.min(s)));
            eprintln!("  overfit seed {seed}: train R@1 = 1.0 after {s} steps");
        } else {
            eprintln!("  overfit seed {seed}: capped at {OVERFIT_STEP_CAP} steps, R@1 = {r1:.3}");
        }
    }
    if passes < OVERFIT_MIN_PASSES {
        return Err(format!(
            "only {passes}/{} seeds reached train R@1 = 1.0 within {OVERFIT_STEP_CAP} steps",
            OVERFIT_SEEDS.len()
        ));
    }
    let fastest = fastest.map(|f| f.to_string()).unwrap_or_default();
    Ok((
        format!(
            "{passes}/{} seeds memorized 32 pairs within {OVERFIT_STEP_CAP} steps (fastest {fastest})",
            OVERFIT_SEEDS.len()
        ),
        csv,
    ))
}

// --- checks 5 and 6: the transfer comparison --------------------------------

/// The reference corpus and training configuration for the transfer checks.
/// Small dimensions keep five seeded four-regime runs inside the budget.
fn transfer_run(dir: &Path) -> std::result::Result<TransferReport, String> {
    let spec = SyntheticSpec { seed: 7, ..SyntheticSpec::default() };
    let manifest = generate_synthetic_corpus(&spec, dir).or_fail()?;
    let features = manifest.load_all_features().or_fail()?;
    let base = TrainConfig {
        mode: TrainMode::Finetune,
        cross: false,
        embed_dim: 32,
        batch_size: 16,
        epochs: Some(16),
        learning_rate: 3e-3,
        dropout: 0.0,
        max_text_len: 16,
        max_video_len: 12,
        ..TrainConfig::default()
    };
    run_transfer_experiment(&manifest, &features, &base, &TRANSFER_SEEDS).or_fail()
}

fn mean_of(report: &TransferReport, regime: &str, language: &str) -> std::result::Result<f64, String> {
    report
        .mean_r1(regime, language)
        .ok_or_else(|| format!("report has no ({regime}, {language}) cell"))
}

fn check_transfer_gap(report: &TransferReport) -> CheckResult {
    let en = &report.languages[0];
    let l2 = &report.languages[1];
    let mp_l2 = mean_of(report, "mp", l2)?;
    let mmp_l2 = mean_of(report, "mmp", l2)?;
    let mp_en = mean_of(report, "mp", en)?;
    let mmp_en = mean_of(report, "mmp", en)?;
    let gap = mmp_l2 - mp_l2;
    let en_diff = (mmp_en - mp_en).abs();
    if gap < TRANSFER_GAP_MIN {
        return Err(format!(
            "zero-shot {l2} R@1 gap {gap:.3} (mmp {mmp_l2:.3} vs mp {mp_l2:.3}) below {TRANSFER_GAP_MIN}"
        ));
    }
    if en_diff >= TRANSFER_EN_DIFF_MAX {
        return Err(format!(
            "{en} R@1 drifted {en_diff:.3} between regimes (mmp {mmp_en:.3} vs mp {mp_en:.3}), cap {TRANSFER_EN_DIFF_MAX}"
        ));
    }
    Ok(format!(
        "zero-shot {l2} gap +{gap:.3} R@1 (needs {TRANSFER_GAP_MIN}), {en} diff {en_diff:.3} (cap {TRANSFER_EN_DIFF_MAX}), {} seeds",
        TRANSFER_SEEDS.len()
    ))
}

fn check_translate_train(report: &TransferReport) -> CheckResult {
    let l2 = &report.languages[1];
    let mmp_l2 = mean_of(report, "mmp", l2)?;
    let all_l2 = mean_of(report, "mmp_all", l2)?;
    if all_l2 < mmp_l2 - TRANSLATE_TRAIN_SLACK {
        return Err(format!(
            "all-language fine-tune {l2} R@1 {all_l2:.3} trails zero-shot {mmp_l2:.3} by more than {TRANSLATE_TRAIN_SLACK}"
        ));
    }
    Ok(format!(
        "all-language fine-tune {l2} R@1 {all_l2:.3} vs zero-shot {mmp_l2:.3} (slack {TRANSLATE_TRAIN_SLACK})"
    ))
}

// --- check 7: the objective ablation ----------------------------------------

fn check_ablation(dir: &Path) -> CheckResult {
    let spec = SyntheticSpec {
        videos: SplitCounts { pretrain: 0, train: 24, val: 8, test: 20 },
        seed: 31,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic_corpus(&spec, dir).or_fail()?;
    let features = manifest.load_all_features().or_fail()?;
    let base = TrainConfig {
        mode: TrainMode::Finetune,
        cross: false,
        embed_dim: 32,
        batch_size: 8,
        epochs: Some(4),
        learning_rate: 3e-3,
        dropout: 0.0,
        max_text_len: 16,
        max_video_len: 12,
        ..TrainConfig::default()
    };
    let tags: Vec<String> = ABLATION_TAGS.iter().map(|t| t.to_string()).collect();
    let report = run_ablation(&manifest, &features, &base, &tags).or_fail()?;
    if report.rows.len() != tags.len() {
        return Err(format!("expected {} rows, got {}", tags.len(), report.rows.len()));
    }
    for (tag, row) in tags.iter().zip(&report.rows) {
        if &row.objective != tag {
            return Err(format!("row order: expected {tag:?}, got {:?}", row.objective));
        }
        let b = &row.loss;
        if !(b.inter.is_finite() && b.intra.is_finite() && b.total.is_finite()) {
            return Err(format!("{tag}: non-finite losses {b:?}"));
        }
        if b.cross.is_some() != tag.contains("cross") {
            return Err(format!("{tag}: cross term presence mismatches the tag"));
        }
        if let Some(c) = b.cross {
            if !c.is_finite() {
                return Err(format!("{tag}: non-finite cross loss {c}"));
            }
        }
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !(ok(row.r1) && ok(row.r5) && ok(row.r10) && row.r1 <= row.r5 && row.r5 <= row.r10) {
            return Err(format!(
                "{tag}: malformed recalls ({}, {}, {})",
                row.r1, row.r5, row.r10
            ));
        }
    }
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    if lines.len() != 1 + tags.len()
        || lines[0] != "objective,loss_inter,loss_intra,loss_cross,loss_total,r1,r5,r10"
    {
        return Err("ablation CSV shape is wrong".into());
    }
    Ok(format!("{} objectives trained and evaluated; losses finite, recalls valid", tags.len()))
}

// --- check 8: whole pipelines rerun byte-for-byte ----------------------------

fn first_difference(a: &str, b: &str) -> String {
    for (i, (la, lb)) in a.lines().zip(b.lines()).enumerate() {
        if la != lb {
            return format!("line {}: {la:?} vs {lb:?}", i + 1);
        }
    }
    format!("lengths differ: {} vs {} bytes", a.len(), b.len())
}

fn check_rerun(
    tmp: &Path,
    overfit_csv: &str,
    transfer: Option<&TransferReport>,
) -> CheckResult {
    if overfit_csv.is_empty() {
        return Err("skipped: the memorization check produced no CSV".into());
    }
    let Some(transfer) = transfer else {
        return Err("skipped: the transfer run produced no report".into());
    };
    let (_, overfit_again) = check_overfit(&tmp.join("overfit-b"))?;
    if overfit_again != overfit_csv {
        return Err(format!(
            "memorization rerun diverged: {}",
            first_difference(overfit_csv, &overfit_again)
        ));
    }
    let transfer_again = transfer_run(&tmp.join("transfer-b"))?;
    let (a, b) = (transfer.to_csv(), transfer_again.to_csv());
    if a != b {
        return Err(format!("transfer rerun diverged: {}", first_difference(&a, &b)));
    }
    Ok(format!(
        "memorization ({} B) and transfer ({} B) reports reproduced byte-for-byte",
        overfit_csv.len(),
        a.len()
    ))
}
