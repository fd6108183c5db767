//! Collaborative-filtering engine built around post-training graph convolution.
//!
//! The pipeline is deliberately split into stages that do not feed back into
//! each other:
//!
//! 1. [`datapipe`] ingests raw interaction logs, k-core filters them, splits
//!    them into train/valid/test and persists datasets and embedding
//!    checkpoints.
//! 2. [`trainer`] fits user/item ID embeddings with an alignment +
//!    γ·uniformity objective and exact analytic gradients — no graph
//!    convolution in the loop (a `gcn` comparison mode exists for ablations).
//! 3. [`graph`] holds the degree-normalized bipartite adjacency and its
//!    sparse products.
//! 4. [`postconv`] applies graph convolution once, after training: discrete
//!    K-layer (with or without self-loop) or a continuous graph ODE solved
//!    with forward Euler.
//! 5. [`eval`] runs full-ranking top-K metrics and the embedding-space
//!    diagnostics (alignment, discrepancy, alignment-force bounds).
//!
//! [`synth`] generates deterministic synthetic interaction data for tests,
//! benches and demos.

pub mod datapipe;
pub mod embedding;
pub mod eval;
pub mod graph;
pub mod postconv;
pub mod synth;
pub mod trainer;

use thiserror::Error;

/// Errors surfaced by any pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("input contains no interactions")]
    EmptyInput,
    #[error("{k}-core filtering removed every interaction")]
    FilterEmpty { k: u32 },
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {found}")]
    BadVersion { found: u32 },
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: u64 },
    #[error("checkpoint has {extra} trailing bytes")]
    TrailingData { extra: u64 },
    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },
    #[error("{kind} {id} has no train interactions")]
    IsolatedNode { kind: &'static str, id: usize },
    #[error("zero-norm row {row} in {matrix} matrix")]
    ZeroNormRow { matrix: &'static str, row: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("batch needs at least {needed} {what}, found {found}")]
    BatchTooSmall {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("{split} split is empty")]
    EmptySplit { split: &'static str },
    #[error("{kind} {id} is not in the graph")]
    NodeNotInGraph { kind: &'static str, id: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("no training performed: max_epochs is 0")]
    NoTraining,
}

pub type Result<T> = std::result::Result<T, Error>;
