//! Python bindings: corpus generation, training, retrieval evaluation,
//! checkpoint loading, and the raw similarity/loss primitives.
//!
//! The module mirrors the CLI's semantics: training functions force the
//! mode, language pool, and seed onto the supplied config before validating,
//! so one config JSON can serve both phases. Reports come back as the same
//! JSON the CLI writes; everything else uses plain Python scalars and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use mmpivot_core::corpus::{generate_synthetic_corpus, load_manifest, Split, SyntheticSpec};
use mmpivot_core::encoder::{ModelParameters, TokenSequence, VideoFeatureSequence};
use mmpivot_core::eval::{evaluate_all, EvalSettings};
use mmpivot_core::graph::Graph;
use mmpivot_core::objective;
use mmpivot_core::trainer::{
    finetune as finetune_run, load_checkpoint, pretrain as pretrain_run, save_checkpoint,
    TrainConfig, TrainMode,
};
use mmpivot_core::Error;

fn pyerr(e: Error) -> PyErr {
    match &e {
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Row-major square matrix from a list of equal-length rows.
fn square(sim: &[Vec<f64>]) -> PyResult<(usize, Vec<f64>)> {
    let b = sim.len();
    if b == 0 || sim.iter().any(|r| r.len() != b) {
        return Err(PyValueError::new_err(format!(
            "similarity matrix must be square and nonempty, got {} rows",
            b
        )));
    }
    Ok((b, sim.iter().flatten().copied().collect()))
}

/// Cosine similarity of two equal-length vectors.
#[pyfunction]
fn cosine_similarity(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    objective::cosine_similarity(&a, &b).map_err(pyerr)
}

/// Pooled bidirectional contrastive loss of a similarity matrix, where
/// diagonal entries are the paired scores.
#[pyfunction]
#[pyo3(signature = (sim, tau=0.1))]
fn nce_loss(sim: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    let (b, flat) = square(&sim)?;
    let mut g = Graph::new();
    let s = g.leaf(&[b, b], flat).map_err(pyerr)?;
    let loss = objective::nce_batch_loss(&mut g, s, tau).map_err(pyerr)?;
    Ok(g.scalar_value(loss))
}

/// Bidirectional margin ranking loss of a similarity matrix.
#[pyfunction]
#[pyo3(signature = (sim, margin=0.2))]
fn triplet_loss(sim: Vec<Vec<f64>>, margin: f64) -> PyResult<f64> {
    let (b, flat) = square(&sim)?;
    let mut g = Graph::new();
    let s = g.leaf(&[b, b], flat).map_err(pyerr)?;
    let loss = objective::triplet_batch_loss(&mut g, s, margin).map_err(pyerr)?;
    Ok(g.scalar_value(loss))
}

/// Generates a synthetic corpus from a spec JSON string and returns a
/// summary dict. `seed` overrides any seed inside the spec.
#[pyfunction]
#[pyo3(signature = (spec_json, out_dir, seed=None))]
fn gen_corpus(
    py: Python<'_>,
    spec_json: &str,
    out_dir: PathBuf,
    seed: Option<u64>,
) -> PyResult<Py<PyDict>> {
    let mut spec: SyntheticSpec = serde_json::from_str(spec_json)
        .map_err(|e| PyValueError::new_err(format!("spec: {e}")))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let manifest = generate_synthetic_corpus(&spec, &out_dir).map_err(pyerr)?;
    let d = PyDict::new(py);
    d.set_item("root", out_dir.display().to_string())?;
    d.set_item("languages", manifest.languages.clone())?;
    d.set_item("videos", manifest.videos.len())?;
    d.set_item("vocab_size", manifest.vocab.size())?;
    d.set_item("feature_dim", manifest.feature_dim)?;
    Ok(d.unbind())
}

fn parse_config(config_json: &str) -> PyResult<TrainConfig> {
    serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))
}

fn run_summary(py: Python<'_>, run: &mmpivot_core::trainer::TrainRun, out: &PathBuf) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("checkpoint", out.display().to_string())?;
    d.set_item("steps", run.steps)?;
    d.set_item("epochs", run.epoch_losses.len())?;
    d.set_item("final_loss", run.epoch_losses.last().map(|b| b.total))?;
    d.set_item("best_epoch", run.best_epoch)?;
    Ok(d.unbind())
}

/// Pre-trains on the corpus's pretrain split and writes a checkpoint.
/// An empty `langs` list means every corpus language.
#[pyfunction]
#[pyo3(signature = (corpus, config_json, langs, out, seed=0))]
fn pretrain(
    py: Python<'_>,
    corpus: PathBuf,
    config_json: &str,
    langs: Vec<String>,
    out: PathBuf,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let manifest = load_manifest(&corpus).map_err(pyerr)?;
    let features = manifest.load_all_features().map_err(pyerr)?;
    let mut cfg = parse_config(config_json)?;
    cfg.mode = TrainMode::Pretrain;
    cfg.cross = false;
    cfg.language_pool = langs;
    cfg.seed = seed;
    cfg.validate().map_err(pyerr)?;
    let run = pretrain_run(&manifest, &features, &cfg).map_err(pyerr)?;
    save_checkpoint(&run.model, &cfg, run.steps, &out).map_err(pyerr)?;
    run_summary(py, &run, &out)
}

/// Fine-tunes on the corpus's train split, optionally from a checkpoint,
/// and writes the selected model. An empty `langs` list means every corpus
/// language; two or more languages train the pivoted multilingual objective.
#[pyfunction]
#[pyo3(signature = (corpus, config_json, langs, out, init=None, seed=0))]
fn finetune(
    py: Python<'_>,
    corpus: PathBuf,
    config_json: &str,
    langs: Vec<String>,
    out: PathBuf,
    init: Option<PathBuf>,
    seed: u64,
) -> PyResult<Py<PyDict>> {
    let manifest = load_manifest(&corpus).map_err(pyerr)?;
    let features = manifest.load_all_features().map_err(pyerr)?;
    let mut cfg = parse_config(config_json)?;
    cfg.mode = TrainMode::Finetune;
    cfg.language_pool = langs;
    cfg.seed = seed;
    cfg.validate().map_err(pyerr)?;
    let start = match init {
        Some(path) => Some(load_checkpoint(&path).map_err(pyerr)?.model),
        None => None,
    };
    let run = finetune_run(start, &manifest, &features, &cfg).map_err(pyerr)?;
    save_checkpoint(&run.model, &cfg, run.steps, &out).map_err(pyerr)?;
    run_summary(py, &run, &out)
}

/// Text-to-video retrieval over a split, returned as the same JSON report
/// the CLI writes. `langs=None` evaluates every corpus language.
#[pyfunction]
#[pyo3(signature = (corpus, ckpt, langs=None, pool_size=100, split="test"))]
fn evaluate(
    corpus: PathBuf,
    ckpt: PathBuf,
    langs: Option<Vec<String>>,
    pool_size: usize,
    split: &str,
) -> PyResult<String> {
    let manifest = load_manifest(&corpus).map_err(pyerr)?;
    let features = manifest.load_all_features().map_err(pyerr)?;
    let checkpoint = load_checkpoint(&ckpt).map_err(pyerr)?;
    let names = langs.unwrap_or_else(|| manifest.languages.clone());
    let indices = names
        .iter()
        .map(|n| {
            manifest.language_index(n).ok_or_else(|| {
                PyValueError::new_err(format!(
                    "language {n:?} is not in the corpus (has: {})",
                    manifest.languages.join(", ")
                ))
            })
        })
        .collect::<PyResult<Vec<usize>>>()?;
    let split = Split::parse(split).ok_or_else(|| {
        PyValueError::new_err(format!(
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
    )
    .map_err(pyerr)?;
    report.to_json().map_err(pyerr)
}

/// A trained model loaded from a checkpoint, exposing inference-mode
/// embeddings in the shared space.
#[pyclass]
struct Model {
    inner: ModelParameters,
    step: usize,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Model> {
        let ckpt = load_checkpoint(&path).map_err(pyerr)?;
        Ok(Model { inner: ckpt.model, step: ckpt.step })
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.dims.embed_dim
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.dims.vocab_size
    }

    #[getter]
    fn feature_dim(&self) -> usize {
        self.inner.dims.feature_dim
    }

    #[getter]
    fn max_text_len(&self) -> usize {
        self.inner.dims.max_text_len
    }

    #[getter]
    fn step(&self) -> usize {
        self.step
    }

    /// Embeds a token-id sequence; at most `max_text_len` tokens.
    fn embed_text(&self, tokens: Vec<usize>, language: usize) -> PyResult<Vec<f64>> {
        self.inner
            .infer_text(&TokenSequence { language, tokens })
            .map_err(pyerr)
    }

    /// Embeds per-second feature rows, each `feature_dim` wide.
    fn embed_video(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let rows = features.len();
        let cols = self.inner.dims.feature_dim;
        if features.iter().any(|r| r.len() != cols) {
            return Err(PyValueError::new_err(format!(
                "every feature row must have {cols} values"
            )));
        }
        let flat: Vec<f64> = features.iter().flatten().copied().collect();
        let v = VideoFeatureSequence::new(rows, cols, flat).map_err(pyerr)?;
        self.inner.infer_video(&v).map_err(pyerr)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(embed_dim={}, vocab_size={}, feature_dim={}, step={})",
            self.inner.dims.embed_dim,
            self.inner.dims.vocab_size,
            self.inner.dims.feature_dim,
            self.step
        )
    }
}

#[pymodule]
fn mmpivot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(nce_loss, m)?)?;
    m.add_function(wrap_pyfunction!(triplet_loss, m)?)?;
    m.add_function(wrap_pyfunction!(gen_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(finetune, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
