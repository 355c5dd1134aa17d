//! Error types shared across the crate.

use thiserror::Error;

/// Errors surfaced by tensor ops, the tape, models, attacks, losses and the
/// training pipeline.
#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid input shape {shape:?}: {reason}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: produced a non-finite output")]
    NonFinite { op: &'static str },

    #[error("backward: root must be scalar-shaped, got {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("tape already consumed by backward")]
    TapeConsumed,

    #[error("finite-diff: function is non-deterministic ({a} != {b} at the same point)")]
    NonDeterministic { a: f64, b: f64 },

    #[error("dataset: {0}")]
    Data(String),

    #[error("dataset noise {noise} too large: Bayes linear-probe accuracy on the templates would drop below 99% (min template distance {min_dist:.4})")]
    NoiseTooLarge { noise: f64, min_dist: f64 },

    #[error("model: unknown component {0:?}")]
    UnknownComponent(String),

    #[error("loss: row {row} of z has norm {norm} (expected unit norm within 1e-5)")]
    NotUnitNorm { row: usize, norm: f64 },

    #[error("loss: {0}")]
    Loss(String),

    #[error("attack aborted at step {step}: non-finite gradient")]
    AttackNonFinite { step: usize },

    #[error("attack: {0}")]
    Attack(String),

    #[error("non-finite loss in phase {phase} (epoch {epoch}, batch {batch}, seed {seed})")]
    NonFiniteLoss {
        phase: String,
        epoch: usize,
        batch: usize,
        seed: u64,
    },

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, AnchorError>;
