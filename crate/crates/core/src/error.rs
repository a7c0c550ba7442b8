use alloc::string::String;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("functions live on different grids")]
    GridMismatch,
    #[error("function has zero L2 norm")]
    DegenerateFunction,
    #[error("index {index} outside 1..={max}")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("unknown scenario-2 case {0} (expected 1..=6)")]
    UnknownCase(u8),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("rank deficient: {0}")]
    RankDeficient(String),
    #[error("singular linear system: {0}")]
    Singular(&'static str),
    #[error("covariance is not positive semidefinite (eigenvalue clip {0:e} relative)")]
    NotPositiveSemidefinite(f64),
}

pub type Result<T> = core::result::Result<T, Error>;
