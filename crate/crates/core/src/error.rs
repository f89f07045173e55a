use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
#[non_exhaustive]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("matrix is not symmetric positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("truncation length {n} exceeds word length {len}")]
    TruncationTooLong { n: u32, len: u32 },

    #[error("index {index} lies outside the interval [{lo}, {hi}]")]
    IndexOutOfInterval { index: i64, lo: i64, hi: i64 },

    #[error("orbit cache does not cover index {0}")]
    CacheGap(i64),

    #[error("step size violates the contraction bound: L1*h^2 = {lhs} >= 2(1 - cos(pi/T)) = {rhs}")]
    ContractionViolated { lhs: f64, rhs: f64 },

    #[error("fixed-point iteration stalled after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("enumeration budget exceeded: max tree depth {k_m} > {limit}")]
    BudgetExceeded { k_m: u32, limit: u32 },

    #[error("missing constant `{0}`")]
    MissingConstant(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
