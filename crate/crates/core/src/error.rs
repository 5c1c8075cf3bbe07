use thiserror::Error;

/// Errors produced while preparing kernels, fitting smoothers or solving for components.
#[derive(Debug, Error)]
pub enum ApcError {
    #[error("precomputed kernels have no pointwise form")]
    NoPointwiseKernel,

    #[error("out-of-sample evaluation is not supported for precomputed kernels")]
    OutOfSampleUnsupported,

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("non-finite input value at position {0}")]
    NonFinite(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    Asymmetric(f64),

    #[error("matrix is not positive semidefinite (smallest eigenvalue {0:e})")]
    NotPositiveSemidefinite(f64),

    #[error("degenerate kernel: {0}")]
    DegenerateKernel(String),

    #[error("null-space design is rank deficient: need at least {needed} distinct values, found {found}")]
    RankDeficientNullSpace { needed: usize, found: usize },

    #[error("penalty parameter must be positive and finite, got {0}")]
    InvalidPenalty(f64),

    #[error("linear system is singular: {0}")]
    Singular(String),

    #[error("degenerate start: initial coefficients have zero norm")]
    DegenerateStart,

    #[error("degenerate problem: {0}")]
    DegenerateProblem(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degrees-of-freedom target {target} outside achievable range [{low}, {high}]")]
    DfTargetOutOfRange { target: f64, low: f64, high: f64 },

    #[error("eigensolver failed: {0}")]
    Eigensolver(String),
}

pub type Result<T> = std::result::Result<T, ApcError>;
