use thiserror::Error;

/// Errors produced by the safety-filter toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value iteration did not converge: residual {residual:e} after {sweeps} sweeps")]
    NonConvergence { residual: f64, sweeps: usize },

    #[error("OOD threshold is not calibrated (NaN)")]
    UncalibratedThreshold,

    #[error("sampling exhausted: {0}")]
    SamplingExhausted(String),

    #[error("insufficient data: requested {requested} of {available}")]
    InsufficientData { requested: usize, available: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("empty sequence")]
    EmptySequence,

    #[error("non-positive variance {0}")]
    NonPositiveVariance(f64),

    #[error("at least {needed} ensemble members required, got {got}")]
    TooFewMembers { needed: usize, got: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("config hash mismatch: artifact built with {artifact}, current config is {current}")]
    ConfigMismatch { artifact: String, current: String },

    #[error("malformed artifact: {0}")]
    Format(String),

    #[error("inconsistent trajectory: {0}")]
    InconsistentTrajectory(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
