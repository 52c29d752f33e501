//! Desk-scale laboratory for recursive symbolic regeneration: a small
//! trainable decoder-only transformer whose token embeddings can be
//! recursively perturbed at inference time, plus a metrics suite and a
//! deterministic experiment harness quantifying the representational and
//! lexical effects of the perturbation.
//!
//! The crate is organized around five modules:
//!
//! - [`numerics`]: deterministic dense linear algebra (matrices, softmax,
//!   cosine similarity, two-component PCA via cyclic Jacobi).
//! - [`model`]: word-level tokenizer, transformer with exposed hidden
//!   states and attention maps, Adam trainer, bit-exact checkpoint I/O.
//! - [`regeneration`]: the recursive attention-conditioned embedding
//!   perturbation, applied at inference time without touching weights.
//! - [`metrics`]: embedding/hidden-state shift, lexical variability,
//!   attention-distribution stability, semantic drift.
//! - [`harness`]: experiment orchestration with seeded grids and
//!   byte-stable CSV/JSON reports.

pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod regeneration;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("numerics: {0}")]
    Numerics(String),
    #[error("tokenizer: {0}")]
    Tokenizer(String),
    #[error("model: {0}")]
    Model(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("perturbation: {0}")]
    Perturbation(String),
    #[error("metrics: {0}")]
    Metrics(String),
    #[error("experiment: {0}")]
    Experiment(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
