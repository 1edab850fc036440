//! Contrastive objectives over batch encodings.
//!
//! Everything is built from one similarity measure (cosine) and one batch
//! loss family. The inter-modal term pulls each text encoding toward its
//! paired video against all in-batch negatives, in both directions at once:
//! the denominator for pair i pools exp(S_ij/tau) and exp(S_ji/tau) over
//! j != i into a single softmax. The intra-modal term applies the same loss
//! between clean and noised encodings of one modality. The cross-lingual
//! term applies it between video-conditioned encodings of two languages
//! describing the same clip.
//!
//! The max-margin triplet loss is the baseline alternative for the
//! inter-modal term only; intra and cross terms always use the NCE form.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use serde::{Deserialize, Serialize};

/// Cosine similarity of two plain vectors. The evaluation stack uses this
/// scalar path so retrieval scores are reproducible independently of the
/// graph ops.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!(
            "cosine of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    let na = na.sqrt();
    let nb = nb.sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Numeric("cosine of zero-norm vector".into()));
    }
    Ok(dot / (na * nb))
}

/// Pairwise cosine matrix: S[i][j] = cosine(Cx row i, Cv row j). Both inputs
/// are B x D with no zero-norm rows.
pub fn similarity_matrix(g: &mut Graph, cx: Var, cv: Var) -> Result<Var> {
    let sx = g.shape(cx).to_vec();
    let sv = g.shape(cv).to_vec();
    if sx != sv || sx.len() != 2 {
        return Err(Error::Shape(format!(
            "similarity_matrix: got {sx:?} vs {sv:?}"
        )));
    }
    let nx = g.normalize_rows(cx)?;
    let nv = g.normalize_rows(cv)?;
    let nvt = g.transpose(nv)?;
    g.matmul(nx, nvt)
}

/// Bidirectional batch NCE over a similarity matrix.
pub fn nce_batch_loss(g: &mut Graph, sim: Var, tau: f64) -> Result<Var> {
    g.nce_loss(sim, tau)
}

/// Bidirectional all-negatives max-margin loss over a similarity matrix.
pub fn triplet_batch_loss(g: &mut Graph, sim: Var, margin: f64) -> Result<Var> {
    g.triplet_loss(sim, margin)
}

/// One intra-modal term: NCE between clean and noised encodings of the same
/// items. Callers sum one term per modality (and per language).
pub fn intra_modal_loss(g: &mut Graph, c: Var, c_masked: Var, tau: f64) -> Result<Var> {
    let sim = similarity_matrix(g, c, c_masked)?;
    nce_batch_loss(g, sim, tau)
}

/// Cross-lingual term: NCE between video-conditioned encodings of the two
/// languages of each pivoted pair.
pub fn cross_lingual_loss(g: &mut Graph, cxv: Var, cyv: Var, tau: f64) -> Result<Var> {
    let sim = similarity_matrix(g, cxv, cyv)?;
    nce_batch_loss(g, sim, tau)
}

/// Inter-modal loss family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Nce,
    Triplet,
}

#[derive(Debug, Clone, Copy)]
pub struct LossOptions {
    pub objective: ObjectiveKind,
    pub tau: f64,
    pub margin: f64,
    /// Add the clean-vs-noised terms.
    pub intra: bool,
    /// Add the video-conditioned cross-lingual term (multilingual only).
    pub cross: bool,
    /// Batches carry a second language y pivoted through the same video.
    pub multilingual: bool,
}

/// Encodings of one batch, stacked B x D. Optional members are present
/// exactly when the corresponding loss term is enabled.
#[derive(Debug, Clone, Copy)]
pub struct BatchEncodings {
    /// c_x for the first (or only) language.
    pub text: Var,
    /// c_v.
    pub video: Var,
    pub text_masked: Option<Var>,
    pub video_masked: Option<Var>,
    /// c_y for the pivoted second language.
    pub text_y: Option<Var>,
    pub text_y_masked: Option<Var>,
    /// c_{x|v} and c_{y|v} for the cross-lingual term.
    pub text_cond: Option<Var>,
    pub text_y_cond: Option<Var>,
}

impl BatchEncodings {
    pub fn inter_only(text: Var, video: Var) -> BatchEncodings {
        BatchEncodings {
            text,
            video,
            text_masked: None,
            video_masked: None,
            text_y: None,
            text_y_masked: None,
            text_cond: None,
            text_y_cond: None,
        }
    }
}

/// Per-term values of one batch's loss, recorded for logs and ablation
/// tables. total is the exact sum of the present components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub inter: f64,
    pub intra: f64,
    pub cross: Option<f64>,
    pub total: f64,
}

fn inter_term(g: &mut Graph, opts: &LossOptions, cx: Var, cv: Var) -> Result<Var> {
    let sim = similarity_matrix(g, cx, cv)?;
    match opts.objective {
        ObjectiveKind::Nce => nce_batch_loss(g, sim, opts.tau),
        ObjectiveKind::Triplet => triplet_batch_loss(g, sim, opts.margin),
    }
}

/// Combined training objective. Returns the scalar loss node (for backward)
/// and the per-term breakdown.
pub fn total_loss(
    g: &mut Graph,
    enc: &BatchEncodings,
    opts: &LossOptions,
) -> Result<(Var, LossBreakdown)> {
    if opts.cross && !opts.multilingual {
        return Err(Error::Config(
            "cross-lingual term requires multilingual batches".into(),
        ));
    }
    let text_y = if opts.multilingual {
        Some(enc.text_y.ok_or_else(|| {
            Error::Config("multilingual loss requires pivoted second-language encodings".into())
        })?)
    } else {
        None
    };

    let mut inter = inter_term(g, opts, enc.text, enc.video)?;
    if let Some(cy) = text_y {
        let extra = inter_term(g, opts, cy, enc.video)?;
        inter = g.add(inter, extra)?;
    }
    let mut total = inter;

    let intra = if opts.intra {
        let (cm, vm) = match (enc.text_masked, enc.video_masked) {
            (Some(cm), Some(vm)) => (cm, vm),
            _ => {
                return Err(Error::Config(
                    "intra-modal term requires masked text and video encodings".into(),
                ))
            }
        };
        let mut intra = intra_modal_loss(g, enc.text, cm, opts.tau)?;
        if let Some(cy) = text_y {
            let ym = enc.text_y_masked.ok_or_else(|| {
                Error::Config("intra-modal term requires masked second-language encodings".into())
            })?;
            let t = intra_modal_loss(g, cy, ym, opts.tau)?;
            intra = g.add(intra, t)?;
        }
        let t = intra_modal_loss(g, enc.video, vm, opts.tau)?;
        intra = g.add(intra, t)?;
        total = g.add(total, intra)?;
        Some(intra)
    } else {
        None
    };

    let cross = if opts.cross {
        let (cxv, cyv) = match (enc.text_cond, enc.text_y_cond) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::Config(
                    "cross-lingual term requires video-conditioned encodings".into(),
                ))
            }
        };
        let c = cross_lingual_loss(g, cxv, cyv, opts.tau)?;
        total = g.add(total, c)?;
        Some(c)
    } else {
        None
    };

    let breakdown = LossBreakdown {
        inter: g.scalar_value(inter),
        intra: intra.map(|v| g.scalar_value(v)).unwrap_or(0.0),
        cross: cross.map(|v| g.scalar_value(v)),
        total: g.scalar_value(total),
    };
    Ok((total, breakdown))
}
