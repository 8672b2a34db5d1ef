use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("eigensolver did not converge after {sweeps} sweeps (off-diagonal norm {off_norm:e})")]
    NoConvergence { sweeps: usize, off_norm: f64 },

    #[error("cannot draw {requested} orthonormal vectors in dimension {dim}")]
    TooManyKeys { requested: usize, dim: usize },

    #[error("argument {value} outside domain {domain}")]
    DomainError { value: f64, domain: &'static str },

    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },

    #[error("sequence length {len} exceeds context length {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("calibration set is empty")]
    EmptyCalibration,

    #[error("challenge set is empty")]
    EmptyChallenge,

    #[error("spectral band holds {available} directions but {requested} were requested")]
    BandTooNarrow { available: usize, requested: usize },

    #[error("degenerate spectrum: largest eigenvalue {lambda_max:e} is not positive")]
    DegenerateSpectrum { lambda_max: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("bit string length {len} invalid: {reason}")]
    LengthError { len: usize, reason: &'static str },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("null calibration needs at least {min} trials, got {got}")]
    InsufficientTrials { got: usize, min: usize },

    #[error("empty score list")]
    EmptyList,

    #[error("division by zero")]
    DivisionByZero,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
