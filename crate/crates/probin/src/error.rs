//! Crate-wide error type. Variants mirror the failure modes of the numerical
//! pipeline; the two solver errors carry the best iterate so callers can
//! inspect partial results.

use crate::eigensolver::Eigenpair;
use crate::inverse::ReconstructionResult;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("mesh foldover: {0}")]
    MeshFoldover(String),
    #[error("constraint violation: {0}")]
    ConstraintViolation(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("unsupported problem: {0}")]
    UnsupportedProblem(String),
    #[error("no convergence after {iterations} outer iterations (lambda = {lambda})", iterations = best.iterations, lambda = best.lambda)]
    NoConvergence { best: Box<Eigenpair> },
    #[error("unsupported exponent: {0}")]
    UnsupportedExponent(String),
    #[error("linearization not invertible: {0}")]
    LinearizationNotInvertible(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("no descent direction at iteration {}", best.iterations)]
    NoDescentDirection { best: Box<ReconstructionResult> },
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable code, used in run manifests.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidMesh(_) => "INVALID_MESH",
            Error::InvalidParameter(_) => "INVALID_PARAMETER",
            Error::MeshFoldover(_) => "MESH_FOLDOVER",
            Error::ConstraintViolation(_) => "CONSTRAINT_VIOLATION",
            Error::DegenerateInput(_) => "DEGENERATE_INPUT",
            Error::UnsupportedProblem(_) => "UNSUPPORTED_PROBLEM",
            Error::NoConvergence { .. } => "NO_CONVERGENCE",
            Error::UnsupportedExponent(_) => "UNSUPPORTED_EXPONENT",
            Error::LinearizationNotInvertible(_) => "LINEARIZATION_NOT_INVERTIBLE",
            Error::InsufficientData(_) => "INSUFFICIENT_DATA",
            Error::NoDescentDirection { .. } => "NO_DESCENT_DIRECTION",
            Error::ConfigError(_) => "CONFIG_ERROR",
            Error::Io(_) => "IO_ERROR",
        }
    }
}
