//! Training loops, configuration, and checkpoint persistence.
//!
//! Both regimes share one step primitive: assemble a batch, encode every
//! view with per-item named mask/dropout streams, take the combined loss,
//! clip the global gradient norm, and apply Adam. Every random draw comes
//! from a stream named by purpose, step (or epoch), and item index, so a
//! run is a pure function of (corpus, config, seed), and two pre-training
//! runs that differ only in language pool consume identical streams for
//! every draw they share.

use crate::corpus::{
    assemble_batch, fmt_float, mask_text_tokens, mask_video_rows, BatchItem, BatchMode,
    CorpusManifest, Split, MASK_RATE,
};
use crate::encoder::{
    bind_model, encode_text, encode_text_conditioned, encode_video, BoundModel, ModelDims,
    ModelParameters, VideoFeatureSequence,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_language, EvalSettings};
use crate::graph::Graph;
use crate::objective::{total_loss, BatchEncodings, LossBreakdown, LossOptions, ObjectiveKind};
use crate::optim::{adam_step, clip_gradients, AdamState};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Pretrain,
    Finetune,
}

/// Flat run configuration. The JSON form uses exactly these field names;
/// unknown keys are an error so typos cannot silently fall back to defaults.
/// An empty `language_pool` means every corpus language.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub objective: ObjectiveKind,
    /// Add the masked-view intra-modal terms.
    pub intra: bool,
    /// Add the video-conditioned cross-lingual term (finetune, pool >= 2).
    pub cross: bool,
    pub language_pool: Vec<String>,
    pub learning_rate: f64,
    pub max_grad_norm: f64,
    pub dropout: f64,
    pub tau: f64,
    pub margin: f64,
    pub batch_size: usize,
    /// None picks the per-mode default: 8 epochs pretrain, 10 finetune.
    pub epochs: Option<usize>,
    pub freeze_below: usize,
    pub seed: u64,
    pub max_text_len: usize,
    pub max_video_len: usize,
    pub min_clip_sec: f64,
    pub max_clip_sec: f64,
    pub embed_dim: usize,
    pub backbone_layers: usize,
    pub backbone_heads: usize,
    pub pool_layers: usize,
    pub pool_heads: usize,
    /// None taps the top backbone layer.
    pub output_layer: Option<usize>,
    pub ffn_mult: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: TrainMode::Pretrain,
            objective: ObjectiveKind::Nce,
            intra: true,
            cross: false,
            language_pool: Vec::new(),
            learning_rate: 2e-4,
            max_grad_norm: 0.2,
            dropout: 0.3,
            tau: 0.1,
            margin: 0.2,
            batch_size: 32,
            epochs: None,
            freeze_below: 0,
            seed: 0,
            max_text_len: 48,
            max_video_len: 64,
            min_clip_sec: 4.0,
            max_clip_sec: 10.0,
            embed_dim: 64,
            backbone_layers: 2,
            backbone_heads: 4,
            pool_layers: 2,
            pool_heads: 4,
            output_layer: None,
            ffn_mult: 2,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<TrainConfig> {
        let cfg: TrainConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(format!(
                "max_grad_norm must be positive, got {}",
                self.max_grad_norm
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!(
                "margin must be finite and >= 0, got {}",
                self.margin
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == Some(0) {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.min_clip_sec > 0.0) || self.max_clip_sec < self.min_clip_sec {
            return Err(Error::Config(format!(
                "clip window [{}, {}] is not a positive range",
                self.min_clip_sec, self.max_clip_sec
            )));
        }
        if self.mode == TrainMode::Pretrain && self.cross {
            return Err(Error::Config(
                "pre-training uses only inter- and intra-modal terms; cross is a finetune flag"
                    .into(),
            ));
        }
        Ok(())
    }

    pub fn effective_epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.mode {
            TrainMode::Pretrain => 8,
            TrainMode::Finetune => 10,
        })
    }

    /// Architecture dims for this config on a corpus with the given vocabulary
    /// and feature width.
    pub fn model_dims(&self, vocab_size: usize, feature_dim: usize) -> ModelDims {
        ModelDims {
            embed_dim: self.embed_dim,
            feature_dim,
            vocab_size,
            max_text_len: self.max_text_len,
            backbone_layers: self.backbone_layers,
            backbone_heads: self.backbone_heads,
            output_layer: self.output_layer.unwrap_or(self.backbone_layers),
            pool_layers: self.pool_layers,
            pool_heads: self.pool_heads,
            ffn_mult: self.ffn_mult,
        }
    }

    /// Language indices of the pool; empty pool means every corpus language.
    pub fn resolve_pool(&self, manifest: &CorpusManifest) -> Result<Vec<usize>> {
        if self.language_pool.is_empty() {
            return Ok((0..manifest.languages.len()).collect());
        }
        self.language_pool
            .iter()
            .map(|name| {
                manifest.language_index(name).ok_or_else(|| {
                    Error::Config(format!("language {name:?} is not in the corpus"))
                })
            })
            .collect()
    }

    fn loss_options(&self, multilingual: bool) -> LossOptions {
        LossOptions {
            objective: self.objective,
            tau: self.tau,
            margin: self.margin,
            intra: self.intra,
            cross: self.cross,
            multilingual,
        }
    }
}

/// Encodes every view of a batch into stacked B x D matrices. Mask draws use
/// streams `mask/s{step}/i{i}/{view}` and dropout draws `drop/s{step}/i{i}/{view}`,
/// so the noise a given example sees depends only on (seed, step, position).
pub fn encode_batch(
    g: &mut Graph,
    bm: &BoundModel,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    step: usize,
    multilingual: bool,
) -> Result<BatchEncodings> {
    if batch.is_empty() {
        return Err(Error::Usage("encode_batch over an empty batch".into()));
    }
    let mut text = Vec::with_capacity(batch.len());
    let mut video = Vec::with_capacity(batch.len());
    let mut mtext = Vec::new();
    let mut mvideo = Vec::new();
    let mut ytext = Vec::new();
    let mut mytext = Vec::new();
    let mut xcond = Vec::new();
    let mut ycond = Vec::new();
    for (i, item) in batch.iter().enumerate() {
        let drop = |view: &str| Rng::stream(cfg.seed, &format!("drop/s{step}/i{i}/{view}"));
        let mask = |view: &str| Rng::stream(cfg.seed, &format!("mask/s{step}/i{i}/{view}"));
        text.push(encode_text(g, bm, &item.text, cfg.dropout, &mut drop("text"), true)?);
        video.push(encode_video(g, bm, &item.features, cfg.dropout, &mut drop("video"), true)?);
        if cfg.intra {
            let mx = mask_text_tokens(&item.text, MASK_RATE, &mut mask("text"));
            mtext.push(encode_text(g, bm, &mx, cfg.dropout, &mut drop("mtext"), true)?);
            let mv = mask_video_rows(&item.features, MASK_RATE, &mut mask("video"));
            mvideo.push(encode_video(g, bm, &mv, cfg.dropout, &mut drop("mvideo"), true)?);
        }
        if multilingual {
            let y = item.second_text.as_ref().ok_or_else(|| {
                Error::Usage("multilingual loss needs pivoted batches".into())
            })?;
            ytext.push(encode_text(g, bm, y, cfg.dropout, &mut drop("ytext"), true)?);
            if cfg.intra {
                let my = mask_text_tokens(y, MASK_RATE, &mut mask("ytext"));
                mytext.push(encode_text(g, bm, &my, cfg.dropout, &mut drop("mytext"), true)?);
            }
            if cfg.cross {
                xcond.push(encode_text_conditioned(
                    g, bm, &item.text, &item.features, cfg.dropout, &mut drop("xcond"), true,
                )?);
                ycond.push(encode_text_conditioned(
                    g, bm, y, &item.features, cfg.dropout, &mut drop("ycond"), true,
                )?);
            }
        }
    }
    let stack = |g: &mut Graph, rows: &[crate::graph::Var]| g.stack_rows(rows);
    Ok(BatchEncodings {
        text: stack(g, &text)?,
        video: stack(g, &video)?,
        text_masked: if cfg.intra { Some(stack(g, &mtext)?) } else { None },
        video_masked: if cfg.intra { Some(stack(g, &mvideo)?) } else { None },
        text_y: if multilingual { Some(stack(g, &ytext)?) } else { None },
        text_y_masked: if multilingual && cfg.intra { Some(stack(g, &mytext)?) } else { None },
        text_cond: if multilingual && cfg.cross { Some(stack(g, &xcond)?) } else { None },
        text_y_cond: if multilingual && cfg.cross { Some(stack(g, &ycond)?) } else { None },
    })
}

fn batch_is_multilingual(batch: &[BatchItem]) -> bool {
    batch.first().is_some_and(|b| b.second_text.is_some())
}

/// Writes the offending batch next to the temp dir so a numeric failure can
/// be replayed, and folds the dump location into the error message.
fn dump_batch(batch: &[BatchItem], step: usize, msg: String) -> Error {
    let path = std::env::temp_dir().join(format!("batch-dump-step{step}.json"));
    let dumped = serde_json::to_string(batch)
        .ok()
        .and_then(|s| std::fs::write(&path, s).ok());
    match dumped {
        Some(()) => Error::Numeric(format!("{msg}; offending batch dumped to {}", path.display())),
        None => Error::Numeric(format!("{msg}; batch dump to {} failed", path.display())),
    }
}

/// Forward-only loss of a batch under this config at a given step, using the
/// exact mask/dropout streams the training step would use. Recomputing a
/// logged step from a saved checkpoint reproduces its reported breakdown.
pub fn batch_breakdown(
    model: &ModelParameters,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let multilingual = batch_is_multilingual(batch);
    let mut g = Graph::new();
    let bm = bind_model(&mut g, model)?;
    let enc = encode_batch(&mut g, &bm, batch, cfg, step, multilingual)?;
    let (_, breakdown) = total_loss(&mut g, &enc, &cfg.loss_options(multilingual))?;
    Ok(breakdown)
}

/// One optimization step: encode, loss, backward, clip, Adam. Frozen
/// parameters receive no gradient and keep their bytes. A non-finite loss or
/// gradient dumps the batch to a JSON file and reports its path.
pub fn train_step(
    model: &mut ModelParameters,
    adam: &mut AdamState,
    batch: &[BatchItem],
    cfg: &TrainConfig,
    step: usize,
) -> Result<LossBreakdown> {
    let multilingual = batch_is_multilingual(batch);
    if cfg.cross && !multilingual {
        return Err(Error::Config(
            "the cross-lingual term needs pivoted multilingual batches".into(),
        ));
    }
    model.store.zero_grads();
    let outcome = (|| -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let bm = bind_model(&mut g, model)?;
        let enc = encode_batch(&mut g, &bm, batch, cfg, step, multilingual)?;
        let (loss, breakdown) = total_loss(&mut g, &enc, &cfg.loss_options(multilingual))?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {} at step {step}",
                breakdown.total
            )));
        }
        g.backward(loss)?;
        g.harvest_grads(&mut model.store)?;
        clip_gradients(&mut model.store, cfg.max_grad_norm)?;
        Ok(breakdown)
    })();
    let breakdown = match outcome {
        Ok(b) => b,
        Err(Error::Numeric(msg)) => return Err(dump_batch(batch, step, msg)),
        Err(e) => return Err(e),
    };
    adam_step(&mut model.store, adam)?;
    Ok(breakdown)
}

/// Result of a training run. `model` is the selected model: the final one,
/// or the best validation epoch's when a validation split exists.
#[derive(Debug)]
pub struct TrainRun {
    pub model: ModelParameters,
    pub steps: usize,
    /// Mean loss components per epoch.
    pub epoch_losses: Vec<LossBreakdown>,
    /// Per-epoch validation score (sum of R@1+R@5+R@10 over pool languages);
    /// empty when the corpus has no validation videos or during pre-training.
    pub val_scores: Vec<f64>,
    /// Epoch whose parameters were kept, when validation selection ran.
    pub best_epoch: Option<usize>,
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let cross = if !parts.is_empty() && parts.iter().all(|p| p.cross.is_some()) {
        Some(parts.iter().map(|p| p.cross.unwrap_or(0.0)).sum::<f64>() / n)
    } else {
        None
    };
    LossBreakdown {
        inter: parts.iter().map(|p| p.inter).sum::<f64>() / n,
        intra: parts.iter().map(|p| p.intra).sum::<f64>() / n,
        cross,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

/// Pre-training over the pretrain split: one fresh clip per video per epoch,
/// single-language batches, languages drawn per clip from the pool. The
/// multilingual and English-only regimes differ only in that pool.
pub fn pretrain(
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Pretrain {
        return Err(Error::Config("pretrain needs a config with mode \"pretrain\"".into()));
    }
    let pool = cfg.resolve_pool(manifest)?;
    let videos = manifest.split_videos(Split::Pretrain);
    if videos.is_empty() {
        return Err(Error::Corpus("the pretrain split has no videos".into()));
    }
    let dims = cfg.model_dims(manifest.vocab.size(), manifest.feature_dim);
    let mut model = ModelParameters::init(&dims, cfg.freeze_below, cfg.seed)?;
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let mut step = 0usize;
    let mut epoch_losses = Vec::new();
    for epoch in 0..cfg.effective_epochs() {
        let mut order = videos.clone();
        Rng::stream(cfg.seed, &format!("pretrain/shuffle/e{epoch}")).shuffle(&mut order);
        let mut parts = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(
                manifest,
                features,
                chunk,
                BatchMode::Single,
                &pool,
                cfg.min_clip_sec,
                cfg.max_clip_sec,
                cfg.max_text_len,
                cfg.max_video_len,
                cfg.seed,
                epoch,
            )?;
            parts.push(train_step(&mut model, &mut adam, &batch, cfg, step)?);
            step += 1;
        }
        let mean = mean_breakdown(&parts);
        eprintln!(
            "pretrain epoch {epoch}: loss {:.6} (inter {:.6}, intra {:.6})",
            mean.total, mean.inter, mean.intra
        );
        epoch_losses.push(mean);
    }
    Ok(TrainRun { model, steps: step, epoch_losses, val_scores: Vec::new(), best_epoch: None })
}

fn validation_score(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    pool: &[usize],
    cfg: &TrainConfig,
    val_count: usize,
) -> Result<f64> {
    let settings = EvalSettings {
        split: Split::Val,
        pool_size: val_count,
        max_text_len: cfg.max_text_len,
        max_video_len: cfg.max_video_len,
    };
    let mut score = 0.0;
    for &li in pool {
        let (r1, r5, r10) = evaluate_language(model, manifest, features, li, &settings)?;
        score += r1 + r5 + r10;
    }
    Ok(score)
}

/// Fine-tuning over the train split. A pool of one language trains on
/// (text, video) pairs; two or more pivot each window through two languages,
/// optionally with the video-conditioned cross-lingual term. When the corpus
/// has validation videos, each epoch is scored and the best epoch's
/// parameters are returned (earliest wins ties).
pub fn finetune(
    init: Option<ModelParameters>,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    cfg: &TrainConfig,
) -> Result<TrainRun> {
    cfg.validate()?;
    if cfg.mode != TrainMode::Finetune {
        return Err(Error::Config("finetune needs a config with mode \"finetune\"".into()));
    }
    let pool = cfg.resolve_pool(manifest)?;
    let multilingual = pool.len() >= 2;
    if cfg.cross && !multilingual {
        return Err(Error::Config(
            "the cross-lingual term needs at least two pool languages".into(),
        ));
    }
    let dims = cfg.model_dims(manifest.vocab.size(), manifest.feature_dim);
    let mut model = match init {
        Some(mut m) => {
            if m.dims != dims {
                return Err(Error::Config(format!(
                    "checkpoint dims {:?} do not match config dims {:?}",
                    m.dims, dims
                )));
            }
            m.set_freeze_below(cfg.freeze_below)?;
            m
        }
        None => ModelParameters::init(&dims, cfg.freeze_below, cfg.seed)?,
    };
    let videos = manifest.split_videos(Split::Train);
    if videos.is_empty() {
        return Err(Error::Corpus("the train split has no videos".into()));
    }
    let batch_mode = if multilingual { BatchMode::Pivoted } else { BatchMode::Single };
    let val_count = manifest.split_videos(Split::Val).len();
    let mut adam = AdamState::new(&model.store, cfg.learning_rate);
    let mut step = 0usize;
    let mut epoch_losses = Vec::new();
    let mut val_scores = Vec::new();
    let mut best: Option<(usize, f64, ModelParameters)> = None;
    for epoch in 0..cfg.effective_epochs() {
        let mut order = videos.clone();
        Rng::stream(cfg.seed, &format!("finetune/shuffle/e{epoch}")).shuffle(&mut order);
        let mut parts = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let batch = assemble_batch(
                manifest,
                features,
                chunk,
                batch_mode,
                &pool,
                cfg.min_clip_sec,
                cfg.max_clip_sec,
                cfg.max_text_len,
                cfg.max_video_len,
                cfg.seed,
                epoch,
            )?;
            parts.push(train_step(&mut model, &mut adam, &batch, cfg, step)?);
            step += 1;
        }
        let mean = mean_breakdown(&parts);
        if val_count > 0 {
            let score = validation_score(&model, manifest, features, &pool, cfg, val_count)?;
            eprintln!(
                "finetune epoch {epoch}: loss {:.6}, validation score {:.6}",
                mean.total, score
            );
            if best.as_ref().is_none_or(|(_, s, _)| score > *s) {
                best = Some((epoch, score, model.clone()));
            }
            val_scores.push(score);
        } else {
            eprintln!("finetune epoch {epoch}: loss {:.6}", mean.total);
        }
        epoch_losses.push(mean);
    }
    let (best_epoch, model) = match best {
        Some((e, _, m)) => (Some(e), m),
        None => (None, model),
    };
    Ok(TrainRun { model, steps: step, epoch_losses, val_scores, best_epoch })
}

/// A persisted model: the config echo, the step counter, the seed, and every
/// parameter block.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: usize,
    pub seed: u64,
    pub model: ModelParameters,
}

/// Text format, one value line per parameter:
///
/// ```text
/// MMPCKPT v1
/// config {json}
/// step {n}
/// seed {n}
/// {name}\t{d0,d1,...}
/// {row-major values, space separated, 9 significant digits}
/// ```
///
/// Values are written through `fmt_float`, whose formatting is a fixed
/// point, so save -> load -> save reproduces the file byte for byte.
pub fn save_checkpoint(
    model: &ModelParameters,
    cfg: &TrainConfig,
    step: usize,
    path: &Path,
) -> Result<()> {
    let json = serde_json::to_string(cfg)
        .map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    let mut out = String::from("MMPCKPT v1\n");
    out.push_str(&format!("config {json}\nstep {step}\nseed {}\n", cfg.seed));
    for (_, name, t) in model.store.iter() {
        let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
        out.push_str(name);
        out.push('\t');
        out.push_str(&dims.join(","));
        out.push('\n');
        let mut first = true;
        for &v in &t.data {
            if !first {
                out.push(' ');
            }
            out.push_str(&fmt_float(v));
            first = false;
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn header_field<'a>(line: Option<&'a str>, key: &str) -> Result<&'a str> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing {key} line")))?;
    line.strip_prefix(key)
        .and_then(|rest| rest.strip_prefix(' '))
        .ok_or_else(|| Error::Checkpoint(format!("expected a {key:?} line, found {line:?}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("MMPCKPT v1") => {}
        Some(other) => {
            return Err(Error::Checkpoint(format!("unknown checkpoint format {other:?}")))
        }
        None => return Err(Error::Checkpoint("empty checkpoint file".into())),
    }
    let config: TrainConfig = serde_json::from_str(header_field(lines.next(), "config")?)
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    config.validate()?;
    let step: usize = header_field(lines.next(), "step")?
        .parse()
        .map_err(|_| Error::Checkpoint("step line is not an integer".into()))?;
    let seed: u64 = header_field(lines.next(), "seed")?
        .parse()
        .map_err(|_| Error::Checkpoint("seed line is not an integer".into()))?;

    let mut blocks: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    while let Some(head) = lines.next() {
        let (name, dims_str) = head
            .split_once('\t')
            .ok_or_else(|| Error::Checkpoint(format!("malformed block header {head:?}")))?;
        let shape = dims_str
            .split(',')
            .map(|d| {
                d.parse::<usize>().map_err(|_| {
                    Error::Checkpoint(format!("block {name:?}: bad dimension {d:?}"))
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        let values_line = lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("block {name:?}: missing values line")))?;
        let values = values_line
            .split(' ')
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(Error::Checkpoint(format!("block {name:?}: bad value {v:?}"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        let want: usize = shape.iter().product();
        if values.len() != want {
            return Err(Error::Checkpoint(format!(
                "block {name:?}: shape {shape:?} holds {want} values, found {}",
                values.len()
            )));
        }
        blocks.push((name.to_string(), shape, values));
    }

    let block_dim = |name: &str, axis: usize| -> Result<usize> {
        blocks
            .iter()
            .find(|(n, ..)| n == name)
            .map(|(_, shape, _)| shape[axis])
            .ok_or_else(|| Error::Checkpoint(format!("missing block {name:?}")))
    };
    let vocab_size = block_dim("backbone.token_emb", 0)?;
    let feature_dim = block_dim("video_proj.w", 0)?;
    let dims = config.model_dims(vocab_size, feature_dim);
    let mut model = ModelParameters::init(&dims, config.freeze_below, seed)?;

    let mut seen = HashSet::new();
    for (name, shape, values) in blocks {
        let id = model
            .store
            .id_of(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected block {name:?}")))?;
        if !seen.insert(name.clone()) {
            return Err(Error::Checkpoint(format!("duplicate block {name:?}")));
        }
        let t = model.store.get_mut(id);
        if t.shape != shape {
            return Err(Error::Checkpoint(format!(
                "block {name:?}: stored shape {shape:?} does not match the architecture's {:?}",
                t.shape
            )));
        }
        t.data = values;
    }
    if seen.len() != model.store.len() {
        for (_, name, _) in model.store.iter() {
            if !seen.contains(name) {
                return Err(Error::Checkpoint(format!("missing block {name:?}")));
            }
        }
    }
    Ok(Checkpoint { config, step, seed, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SplitCounts, SyntheticSpec};
    use crate::encoder::TokenSequence;

    fn tiny_corpus(seed: u64) -> (tempfile::TempDir, CorpusManifest, Vec<VideoFeatureSequence>) {
        let dir = tempfile::tempdir().unwrap();
        let spec = SyntheticSpec {
            languages: vec!["en".into(), "l2".into()],
            n_concepts: 8,
            videos: SplitCounts { pretrain: 6, train: 6, val: 4, test: 4 },
            segments_per_video: [2, 3],
            segment_len_sec: [4, 6],
            feature_dim: 5,
            noise_std: 0.05,
            distractor_prob: 0.1,
            seed,
        };
        let m = generate_synthetic_corpus(&spec, dir.path()).unwrap();
        let f = m.load_all_features().unwrap();
        (dir, m, f)
    }

    fn tiny_cfg(mode: TrainMode) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: 3,
            epochs: Some(2),
            learning_rate: 1e-3,
            max_text_len: 16,
            max_video_len: 12,
            embed_dim: 8,
            backbone_heads: 2,
            pool_heads: 2,
            ..TrainConfig::default()
        }
    }

    fn store_bytes(m: &ModelParameters) -> Vec<(String, Vec<u64>)> {
        m.store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    fn one_batch(
        m: &CorpusManifest,
        f: &[VideoFeatureSequence],
        cfg: &TrainConfig,
        mode: BatchMode,
    ) -> Vec<BatchItem> {
        let videos = m.split_videos(Split::Train);
        let pool = cfg.resolve_pool(m).unwrap();
        assemble_batch(
            m,
            f,
            &videos[..cfg.batch_size],
            mode,
            &pool,
            cfg.min_clip_sec,
            cfg.max_clip_sec,
            cfg.max_text_len,
            cfg.max_video_len,
            cfg.seed,
            0,
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_round_trip_and_reject_unknown_keys() {
        let cfg: TrainConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(cfg.learning_rate, 2e-4);
        assert_eq!(cfg.max_grad_norm, 0.2);
        assert_eq!(cfg.dropout, 0.3);
        assert_eq!(cfg.batch_size, 32);
        assert_eq!(cfg.effective_epochs(), 8);
        let ft: TrainConfig = serde_json::from_str(r#"{"mode":"finetune"}"#).unwrap();
        assert_eq!(ft.effective_epochs(), 10);
        let back: TrainConfig =
            serde_json::from_str(&serde_json::to_string(&ft).unwrap()).unwrap();
        assert_eq!(back, ft);
        assert!(TrainConfig::from_json(r#"{"learning_rat":0.1}"#).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let bad = [
            TrainConfig { cross: true, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { tau: 0.0, ..TrainConfig::default() },
            TrainConfig { dropout: 1.0, ..TrainConfig::default() },
            TrainConfig { epochs: Some(0), ..TrainConfig::default() },
            TrainConfig { learning_rate: -1.0, ..TrainConfig::default() },
            TrainConfig { min_clip_sec: 6.0, max_clip_sec: 5.0, ..TrainConfig::default() },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
        }
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_ok());
        let ft_cross = TrainConfig {
            mode: TrainMode::Finetune,
            cross: true,
            ..TrainConfig::default()
        };
        assert!(ft_cross.validate().is_ok());
    }

    #[test]
    fn zero_learning_rate_reports_loss_but_moves_nothing() {
        let (_d, m, f) = tiny_corpus(5);
        let cfg = TrainConfig { learning_rate: 0.0, ..tiny_cfg(TrainMode::Finetune) };
        let batch = one_batch(&m, &f, &cfg, BatchMode::Pivoted);
        let dims = cfg.model_dims(m.vocab.size(), m.feature_dim);
        let mut model = ModelParameters::init(&dims, 0, cfg.seed).unwrap();
        let before = store_bytes(&model);
        let mut adam = AdamState::new(&model.store, cfg.learning_rate);
        let b1 = train_step(&mut model, &mut adam, &batch, &cfg, 7).unwrap();
        assert!(b1.total.is_finite() && b1.total > 0.0);
        assert_eq!(store_bytes(&model), before);
        // Same step, same params: the identical streams reproduce the loss.
        let b2 = train_step(&mut model, &mut adam, &batch, &cfg, 7).unwrap();
        assert_eq!(b1, b2);
        // A different step draws different masks and dropout.
        let b3 = train_step(&mut model, &mut adam, &batch, &cfg, 8).unwrap();
        assert_ne!(b1, b3);
    }

    #[test]
    fn loss_on_a_fixed_batch_decreases_over_fifty_steps() {
        let (_d, m, f) = tiny_corpus(11);
        let cfg = TrainConfig {
            learning_rate: 5e-3,
            dropout: 0.0,
            intra: false,
            ..tiny_cfg(TrainMode::Finetune)
        };
        let batch = one_batch(&m, &f, &cfg, BatchMode::Single);
        let dims = cfg.model_dims(m.vocab.size(), m.feature_dim);
        let mut model = ModelParameters::init(&dims, 0, cfg.seed).unwrap();
        let mut adam = AdamState::new(&model.store, cfg.learning_rate);
        let mut losses = Vec::new();
        for step in 0..50 {
            losses.push(train_step(&mut model, &mut adam, &batch, &cfg, step).unwrap().total);
        }
        assert!(
            losses[49] < 0.5 * losses[0],
            "no progress: first {} last {}",
            losses[0],
            losses[49]
        );
    }

    #[test]
    fn frozen_blocks_hold_bitwise_while_heads_move() {
        let (_d, m, f) = tiny_corpus(13);
        let mut cfg = tiny_cfg(TrainMode::Finetune);
        cfg.freeze_below = cfg.backbone_layers;
        cfg.learning_rate = 1e-2;
        let batch = one_batch(&m, &f, &cfg, BatchMode::Pivoted);
        let dims = cfg.model_dims(m.vocab.size(), m.feature_dim);
        let mut model = ModelParameters::init(&dims, cfg.freeze_below, cfg.seed).unwrap();
        let before = store_bytes(&model);
        let mut adam = AdamState::new(&model.store, cfg.learning_rate);
        for step in 0..3 {
            train_step(&mut model, &mut adam, &batch, &cfg, step).unwrap();
        }
        let after = store_bytes(&model);
        let mut heads_moved = false;
        for ((name, a), (_, b)) in before.iter().zip(after.iter()) {
            if name.starts_with("backbone.") {
                assert_eq!(a, b, "frozen {name} moved");
            } else if a != b {
                heads_moved = true;
            }
        }
        assert!(heads_moved);
    }

    #[test]
    fn pretrain_is_deterministic() {
        let (_d, m, f) = tiny_corpus(17);
        let cfg = tiny_cfg(TrainMode::Pretrain);
        let a = pretrain(&m, &f, &cfg).unwrap();
        let b = pretrain(&m, &f, &cfg).unwrap();
        assert_eq!(store_bytes(&a.model), store_bytes(&b.model));
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.steps, 4);
    }

    #[test]
    fn english_only_pretrain_leaves_other_language_embeddings_at_init() {
        let (_d, m, f) = tiny_corpus(19);
        let mut mp_cfg = tiny_cfg(TrainMode::Pretrain);
        mp_cfg.language_pool = vec!["en".into()];
        let mmp_cfg = tiny_cfg(TrainMode::Pretrain);

        let dims = mp_cfg.model_dims(m.vocab.size(), m.feature_dim);
        let init = ModelParameters::init(&dims, 0, mp_cfg.seed).unwrap();
        let init_emb = init.store.get(init.token_emb).data.clone();
        let d = dims.embed_dim;

        let mp = pretrain(&m, &f, &mp_cfg).unwrap();
        let mmp = pretrain(&m, &f, &mmp_cfg).unwrap();
        let mp_emb = &mp.model.store.get(mp.model.token_emb).data;
        let mmp_emb = &mmp.model.store.get(mmp.model.token_emb).data;

        let row = |data: &[f64], id: usize| data[id * d..(id + 1) * d].to_vec();
        let l2_ids: Vec<usize> = (0..m.vocab.size())
            .filter(|&id| m.vocab.language_of(id) == Some(1))
            .collect();
        assert!(!l2_ids.is_empty());
        for &id in &l2_ids {
            assert_eq!(row(mp_emb, id), row(&init_emb, id), "token {id} moved under MP");
        }
        assert!(l2_ids.iter().any(|&id| row(mmp_emb, id) != row(&init_emb, id)));
        // English embeddings moved in both regimes.
        let en_ids: Vec<usize> = (0..m.vocab.size())
            .filter(|&id| m.vocab.language_of(id) == Some(0))
            .collect();
        assert!(en_ids.iter().any(|&id| row(mp_emb, id) != row(&init_emb, id)));
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let (_d, m, f) = tiny_corpus(23);
        let mut cfg = tiny_cfg(TrainMode::Pretrain);
        cfg.epochs = Some(1);
        let run = pretrain(&m, &f, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&run.model, &cfg, run.steps, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        assert_eq!(loaded.step, run.steps);
        assert_eq!(loaded.seed, cfg.seed);
        assert_eq!(loaded.config, cfg);
        save_checkpoint(&loaded.model, &loaded.config, loaded.step, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        // Encodings survive the 9-digit round trip.
        let x = TokenSequence { language: 0, tokens: vec![2, 3, 4] };
        let before = run.model.infer_text(&x).unwrap();
        let after = loaded.model.infer_text(&x).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-6);
        }
        let v = f[0].truncated(8);
        let before = run.model.infer_video(&v).unwrap();
        let after = loaded.model.infer_video(&v).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_load_rejects_corruption() {
        let (_d, m, f) = tiny_corpus(29);
        let mut cfg = tiny_cfg(TrainMode::Pretrain);
        cfg.epochs = Some(1);
        let run = pretrain(&m, &f, &cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&run.model, &cfg, run.steps, &path).unwrap();
        let good = std::fs::read_to_string(&path).unwrap();

        let check = |content: &str, needle: &str| {
            let p = dir.path().join("bad.ckpt");
            std::fs::write(&p, content).unwrap();
            match load_checkpoint(&p) {
                Err(Error::Checkpoint(msg)) => {
                    assert!(msg.contains(needle), "{msg:?} lacks {needle:?}")
                }
                other => panic!("expected checkpoint error, got {other:?}"),
            }
        };

        check("MMPCKPT v2\n", "unknown checkpoint format");
        check("", "empty checkpoint");
        // Truncation: drop the last line (a values line).
        let mut lines: Vec<&str> = good.lines().collect();
        let dropped = lines.pop().unwrap();
        assert!(!dropped.contains('\t'));
        check(&(lines.join("\n") + "\n"), "missing values line");
        // Corrupt block: remove one value from the first values line.
        let mut lines: Vec<String> = good.lines().map(String::from).collect();
        let vals_idx = 5;
        assert!(lines[4].contains('\t'), "line 4 should be a block header");
        let vals: Vec<&str> = lines[vals_idx].split(' ').collect();
        lines[vals_idx] = vals[..vals.len() - 1].join(" ");
        let block_name = lines[4].split('\t').next().unwrap().to_string();
        check(&(lines.join("\n") + "\n"), &block_name);
        // Unexpected block name.
        let renamed = good.replacen("backbone.pos_emb\t", "backbone.pose_emb\t", 1);
        check(&renamed, "unexpected block \"backbone.pose_emb\"");
        // A block the architecture needs is gone entirely.
        let missing = good.replacen("backbone.token_emb\t", "backbone.tok_emb\t", 1);
        check(&missing, "missing block \"backbone.token_emb\"");
    }

    #[test]
    fn finetune_selects_the_best_validation_epoch() {
        let (_d, m, f) = tiny_corpus(31);
        let mut cfg = tiny_cfg(TrainMode::Finetune);
        cfg.epochs = Some(3);
        cfg.cross = true;
        let run = finetune(None, &m, &f, &cfg).unwrap();
        assert_eq!(run.val_scores.len(), 3);
        assert_eq!(run.epoch_losses.len(), 3);
        assert!(run.epoch_losses.iter().all(|b| b.cross.is_some()));
        let best = run.best_epoch.unwrap();
        let best_score = run.val_scores[best];
        for (e, &s) in run.val_scores.iter().enumerate() {
            assert!(s < best_score || (s == best_score && e >= best));
        }
        // The returned parameters really are the best epoch's: rescoring them
        // reproduces that epoch's validation score.
        let pool = cfg.resolve_pool(&m).unwrap();
        let rescored = validation_score(&run.model, &m, &f, &pool, &cfg, 4).unwrap();
        assert!((rescored - best_score).abs() < 1e-12);
    }

    #[test]
    fn finetune_rejects_mismatched_checkpoint_dims() {
        let (_d, m, f) = tiny_corpus(37);
        let cfg = tiny_cfg(TrainMode::Finetune);
        let mut other = cfg.clone();
        other.embed_dim = 16;
        let wrong =
            ModelParameters::init(&other.model_dims(m.vocab.size(), m.feature_dim), 0, 0).unwrap();
        match finetune(Some(wrong), &m, &f, &cfg) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("embed_dim: 16") && msg.contains("embed_dim: 8"), "{msg}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn reported_breakdown_is_recomputable_from_a_checkpoint() {
        let (_d, m, f) = tiny_corpus(41);
        let cfg = tiny_cfg(TrainMode::Finetune);
        let batch = one_batch(&m, &f, &cfg, BatchMode::Pivoted);
        let dims = cfg.model_dims(m.vocab.size(), m.feature_dim);
        let mut model = ModelParameters::init(&dims, 0, cfg.seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pre.ckpt");
        save_checkpoint(&model, &cfg, 0, &path).unwrap();
        let mut adam = AdamState::new(&model.store, cfg.learning_rate);
        let reported = train_step(&mut model, &mut adam, &batch, &cfg, 3).unwrap();
        let reloaded = load_checkpoint(&path).unwrap();
        let recomputed = batch_breakdown(&reloaded.model, &batch, &cfg, 3).unwrap();
        assert!((reported.total - recomputed.total).abs() < 1e-6);
        assert!((reported.inter - recomputed.inter).abs() < 1e-6);
        assert!((reported.intra - recomputed.intra).abs() < 1e-6);
    }
}
