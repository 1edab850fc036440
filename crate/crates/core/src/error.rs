//! Error taxonomy shared by every module.
//!
//! The CLI maps these onto its exit-code contract: usage problems exit 1
//! (handled by argument parsing before any `Error` exists), data/format/config
//! problems exit 2, and numeric failures exit 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shape disagreement (matmul inner dims, grad/data mismatch, ...).
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid hyperparameter or incompatible configuration (bad temperature,
    /// dropout rate outside [0,1), checkpoint dims vs. config dims, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Corpus files that fail validation: malformed rows, unknown tokens,
    /// overlapping segments, missing feature files.
    #[error("corpus error: {0}")]
    Corpus(String),

    /// Checkpoint serialization violations (bad header, corrupt block).
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Clip/batch sampling preconditions (no subtitles in pool languages,
    /// too few distinct videos for a batch).
    #[error("sampling error: {0}")]
    Sampling(String),

    /// Evaluation preconditions (pool larger than the split, missing captions).
    #[error("evaluation error: {0}")]
    Eval(String),

    /// NaN/Inf surfaced by an operation, zero-norm vectors in cosine space,
    /// non-finite losses.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Misuse of an API (backward on a non-scalar, empty query, ...).
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for the CLI contract. Usage errors at the flag level are
    /// produced by the argument parser (exit 1) before an `Error` exists, so
    /// everything here is either a data problem (2) or a numeric one (3).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 3,
            _ => 2,
        }
    }
}
