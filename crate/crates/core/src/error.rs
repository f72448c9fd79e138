use thiserror::Error;

/// Errors produced by the estimators, samplers and the simulation harness.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("matrix is not positive semidefinite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("degenerate variance {value:e} at index {index}")]
    DegenerateVariance { index: usize, value: f64 },
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("normalized correlation {0} outside [-1, 1]")]
    Domain(f64),
    #[error("quantized-output covariance is singular")]
    SingularCr,
    #[error("aggregate-noise covariance is singular")]
    SingularCq,
    #[error("invalid pilot phases: {0}")]
    InvalidPhases(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid integration budget: {0}")]
    InvalidBudget(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("estimator not applicable: {0}")]
    NotApplicable(String),
}

pub type Result<T> = std::result::Result<T, Error>;
