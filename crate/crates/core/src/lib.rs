//! Desk-scale engine for contrastive text-video embedding training and
//! cross-lingual retrieval evaluation.
//!
//! The crate is organized bottom-up:
//! - `tensor`, `graph`, `optim`, `rng`: dense f64 tensors, reverse-mode
//!   autodiff on an operation tape, Adam with global-norm clipping, and
//!   deterministic named random streams.
//! - `encoder`: the text backbone, video projector, and Transformer pooling
//!   heads that map token sequences and per-second video features into a
//!   shared embedding space.
//! - `objective`: cosine similarity and the contrastive losses (inter-modal,
//!   intra-modal with masking, multilingual, and video-conditioned
//!   cross-lingual).
//! - `corpus`: file formats, validation, clip sampling, masking, and the
//!   synthetic multilingual corpus generator.
//! - `trainer`: pre-training and fine-tuning loops, configuration, and
//!   checkpoints.
//! - `eval`: retrieval ranking, recall@k, and report emission.
//! - `pipeline`: the multi-regime transfer experiment and the objective
//!   ablation, shared between the CLI and the test suite.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod graph;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
