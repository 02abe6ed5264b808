//! Minimal dense-network substrate.
//!
//! Everything the learned model needs: fully connected layers with exact
//! reverse-mode gradients, Adam and SGD-with-momentum, and the handful of
//! numeric helpers (softmax, cosine similarity, cross entropy) shared by the
//! heads and the search. All arithmetic is `f64`.

mod mlp;
mod ops;
mod optim;

pub use mlp::{Activation, ForwardCache, LayerSpec, Mlp, MlpSpec, ParamStore};
pub use ops::{
    argmax, cosine_similarity, cosine_similarity_grad, cross_entropy, entropy, log_softmax,
    softmax, squared_distance,
};
pub use optim::{
    adam_step, sgd_momentum_step, NetCheckpoint, OptimizerConfig, OptimizerKind, OptimizerState,
    CHECKPOINT_SCHEMA,
};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffnetError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("empty input vector")]
    Empty,
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("zero-norm vector in cosine similarity")]
    ZeroNorm,
    #[error("target distribution has a negative entry at index {0}")]
    NegativeTarget(usize),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<(), DiffnetError> {
    if expected == got {
        Ok(())
    } else {
        Err(DiffnetError::DimensionMismatch { what, expected, got })
    }
}
