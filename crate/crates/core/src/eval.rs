//! Text to video retrieval evaluation.
//!
//! The protocol is deterministic end to end: the candidate pool is the first
//! pool_size videos of the split by sorted video id, each query is that
//! video's first caption in the query language, and every similarity is the
//! plain scalar cosine of unconditioned encodings. Ranks break ties by pool
//! index (a tie with a lower-index candidate counts against the query), so
//! the same checkpoint and corpus always produce the same report.

use crate::corpus::{CorpusManifest, Split};
use crate::encoder::{ModelParameters, TokenSequence, VideoFeatureSequence};
use crate::error::{Error, Result};
use crate::objective::cosine_similarity;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// Rank of the paired candidate: 1 + (strictly better candidates) + (equal
/// candidates at lower pool index).
pub fn rank_of_paired(query: &[f64], pool: &[Vec<f64>], paired: usize) -> Result<usize> {
    if pool.is_empty() || paired >= pool.len() {
        return Err(Error::Eval(format!(
            "paired index {paired} outside pool of {}",
            pool.len()
        )));
    }
    let s_paired = cosine_similarity(query, &pool[paired])?;
    let mut rank = 1;
    for (j, cand) in pool.iter().enumerate() {
        if j == paired {
            continue;
        }
        let s = cosine_similarity(query, cand)?;
        if s > s_paired || (s == s_paired && j < paired) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Fraction of ranks within the top k.
pub fn recall_at_k(ranks: &[usize], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// Everything the protocol needs besides model and corpus.
#[derive(Debug, Clone, Copy)]
pub struct EvalSettings {
    pub split: Split,
    pub pool_size: usize,
    pub max_text_len: usize,
    pub max_video_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub language: String,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub pool: usize,
    pub queries: usize,
}

/// Per-language recalls plus their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub checkpoint: String,
    pub seed: u64,
    pub split: String,
    pub pool_size: usize,
    pub rows: Vec<LanguageRow>,
    pub avg_r1: f64,
    pub avg_r5: f64,
    pub avg_r10: f64,
}

impl RetrievalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Eval(format!("report serialization: {e}")))
    }

    pub fn from_json(text: &str) -> Result<RetrievalReport> {
        serde_json::from_str(text).map_err(|e| Error::Eval(format!("report parse: {e}")))
    }

    /// `language,r1,r5,r10,pool,queries` rows and a final `avg` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,r1,r5,r10,pool,queries\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{},{}",
                r.language, r.r1, r.r5, r.r10, r.pool, r.queries
            );
        }
        let _ = writeln!(out, "avg,{:.6},{:.6},{:.6},,", self.avg_r1, self.avg_r5, self.avg_r10);
        out
    }
}

/// The deterministic pool: indices of the first pool_size videos of the
/// split by sorted id, with their inference-mode encodings.
fn encode_pool(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    settings: &EvalSettings,
) -> Result<(Vec<usize>, Vec<Vec<f64>>)> {
    let ids = manifest.split_videos(settings.split);
    if ids.len() < settings.pool_size || settings.pool_size == 0 {
        return Err(Error::Eval(format!(
            "split {} has {} videos, pool needs {}",
            settings.split.name(),
            ids.len(),
            settings.pool_size
        )));
    }
    let pool_ids: Vec<usize> = ids[..settings.pool_size].to_vec();
    let mut encodings = Vec::with_capacity(pool_ids.len());
    for &vi in &pool_ids {
        let v = features[vi].truncated(settings.max_video_len);
        encodings.push(model.infer_video(&v)?);
    }
    Ok((pool_ids, encodings))
}

/// First caption of the video in the language, truncated to the query limit.
fn query_tokens(
    manifest: &CorpusManifest,
    video_idx: usize,
    language: usize,
    max_text_len: usize,
) -> Result<TokenSequence> {
    let segs = manifest.segments(video_idx, language);
    let first = segs.first().ok_or_else(|| {
        Error::Eval(format!(
            "video {} has no caption in language {}",
            manifest.videos[video_idx].video_id, manifest.languages[language]
        ))
    })?;
    let mut tokens = first.tokens.clone();
    tokens.truncate(max_text_len);
    Ok(TokenSequence { language, tokens })
}

fn recalls_against_pool(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    language: usize,
    pool_ids: &[usize],
    pool_enc: &[Vec<f64>],
    settings: &EvalSettings,
) -> Result<(f64, f64, f64)> {
    let mut ranks = Vec::with_capacity(pool_ids.len());
    for (qi, &vi) in pool_ids.iter().enumerate() {
        let q = query_tokens(manifest, vi, language, settings.max_text_len)?;
        let qe = model.infer_text(&q)?;
        ranks.push(rank_of_paired(&qe, pool_enc, qi)?);
    }
    Ok((recall_at_k(&ranks, 1), recall_at_k(&ranks, 5), recall_at_k(&ranks, 10)))
}

/// One language's (R@1, R@5, R@10) under the deterministic pool protocol.
pub fn evaluate_language(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    language: usize,
    settings: &EvalSettings,
) -> Result<(f64, f64, f64)> {
    let (pool_ids, pool_enc) = encode_pool(model, manifest, features, settings)?;
    recalls_against_pool(model, manifest, language, &pool_ids, &pool_enc, settings)
}

/// Per-language rows plus the average, with videos encoded once.
pub fn evaluate_all(
    model: &ModelParameters,
    manifest: &CorpusManifest,
    features: &[VideoFeatureSequence],
    languages: &[usize],
    settings: &EvalSettings,
    checkpoint: &str,
    seed: u64,
) -> Result<RetrievalReport> {
    if languages.is_empty() {
        return Err(Error::Eval("no languages to evaluate".into()));
    }
    let (pool_ids, pool_enc) = encode_pool(model, manifest, features, settings)?;
    let mut rows = Vec::with_capacity(languages.len());
    for &li in languages {
        let (r1, r5, r10) =
            recalls_against_pool(model, manifest, li, &pool_ids, &pool_enc, settings)?;
        rows.push(LanguageRow {
            language: manifest.languages[li].clone(),
            r1,
            r5,
            r10,
            pool: pool_ids.len(),
            queries: pool_ids.len(),
        });
    }
    let n = rows.len() as f64;
    Ok(RetrievalReport {
        checkpoint: checkpoint.to_string(),
        seed,
        split: settings.split.name().to_string(),
        pool_size: settings.pool_size,
        avg_r1: rows.iter().map(|r| r.r1).sum::<f64>() / n,
        avg_r5: rows.iter().map(|r| r.r5).sum::<f64>() / n,
        avg_r10: rows.iter().map(|r| r.r10).sum::<f64>() / n,
        rows,
    })
}
