use thiserror::Error;

/// Errors surfaced by the engine. Numerical routines fail loudly on
/// malformed inputs rather than propagating NaN.
#[derive(Debug, Error)]
pub enum CoreError {
    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value from {source_name}: {detail}")]
    NonFinite { source_name: String, detail: String },

    #[error("empty particle cloud")]
    EmptyCloud,

    #[error("weights must be nonnegative and sum to 1 (got {0})")]
    BadWeights(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("jump condition violated at t={time}: |mismatch|={gap:.3e}")]
    JumpCondition { time: f64, gap: f64 },

    #[error("invalid point path: {0}")]
    InvalidPointPath(String),

    #[error("invalid control kernel: {0}")]
    InvalidKernel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
