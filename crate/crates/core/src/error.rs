use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("integration diverged at step {step}")]
    IntegrationDiverged { step: usize },

    #[error("trajectory too short: {required} steps required, {available} available")]
    InsufficientLength { required: usize, available: usize },

    #[error("stationary distribution did not converge after {iterations} power iterations (reducible or periodic chain?)")]
    StationaryNotConverged { iterations: usize },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("non-finite value at row {row}, column {column}")]
    NonFiniteInput { row: usize, column: usize },

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("matrix is not positive semidefinite (smallest eigenvalue {min_eigenvalue:e})")]
    NotPositiveSemidefinite { min_eigenvalue: f64 },

    #[error("{what} is singular or ill-conditioned (condition estimate {condition:e}); use a ridge parameter > 0")]
    Singular { what: &'static str, condition: f64 },

    #[error("eigensolver did not converge after {iterations} iterations ({deflated} of {dim} eigenvalues deflated)")]
    EigenNotConverged {
        iterations: usize,
        deflated: usize,
        dim: usize,
    },

    #[error("lasso did not converge at lambda index {lambda_index} after {sweeps} sweeps")]
    LassoNotConverged { lambda_index: usize, sweeps: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
