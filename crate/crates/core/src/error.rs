use thiserror::Error;

/// Errors raised by the NNGP library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("location set is empty")]
    EmptyLocations,

    #[error("locations {first} and {second} coincide")]
    DuplicateLocation { first: usize, second: usize },

    #[error("query location coincides with reference location {0}")]
    QueryOnReference(usize),

    #[error("location {0} has a non-finite coordinate")]
    NonFiniteLocation(usize),

    #[error("invalid kernel parameters: {0}")]
    InvalidKernel(String),

    #[error("invalid cross-covariance: {0}")]
    InvalidCrossCovariance(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("neighbor covariance of node {0} is not positive definite after jitter")]
    SingularNeighborCovariance(usize),

    #[error("{0}")]
    NotPositiveDefinite(String),

    #[error("sparse factorization failed at column {0}; try the sequential algorithm")]
    SparseFactorization(usize),

    #[error("X'D^-1 X is singular under a flat beta prior; use an informative normal prior")]
    SingularDesign,

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("problem too large for the dense oracle: n = {n} exceeds the cap {cap}")]
    OracleTooLarge { n: usize, cap: usize },
}

/// Coarse classification used to map errors onto process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::SingularNeighborCovariance(_)
            | Error::NotPositiveDefinite(_)
            | Error::SparseFactorization(_)
            | Error::SingularDesign => ErrorKind::Numerical,
            _ => ErrorKind::Validation,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
