//! Shared error type for every module in the crate.

use thiserror::Error;

/// Errors surfaced by tensor math, training, and experiment plumbing.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("axis {axis} is out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("frozen model cannot be mutated or traced for gradients")]
    FrozenViolation,

    #[error("batch too small: need at least {need} rows, got {got}")]
    BatchTooSmall { need: usize, got: usize },

    #[error("kernel bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),

    #[error("cosine distance is undefined for the zero row at index {0}")]
    ZeroVector(usize),

    #[error("no teacher model available: regularizer runs only from the second task on")]
    NoTeacher,

    #[error("cannot sample from an empty buffer")]
    EmptyBuffer,

    #[error("gradients unavailable: run backward on the loss first")]
    MissingGradient,

    #[error("metric requires at least two tasks")]
    SingleTask,

    #[error("accuracy matrix incomplete: {0}")]
    IncompleteMatrix(String),

    #[error("invalid task index {0}")]
    InvalidTask(usize),

    #[error("empty input")]
    EmptyInput,

    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),

    #[error("invalid hyperparameters: {0}")]
    InvalidHyperParams(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
