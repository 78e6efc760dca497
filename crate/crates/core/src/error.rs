use std::fmt;

use thiserror::Error;

use crate::data::idx::LoadError;
use crate::model::Batch;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// A single config validation failure, keyed by its JSON field path.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl FieldError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

fn join_fields(errors: &[FieldError]) -> String {
    errors
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid configuration: {}", join_fields(.0))]
    InvalidConfig(Vec<FieldError>),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("audit error: {0}")]
    Audit(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error(transparent)]
    Load(#[from] LoadError),

    /// The gradient-matching objective became non-finite; carries the last
    /// finite dummy batch.
    #[error("reconstruction diverged at iteration {iteration}")]
    ReconstructionDiverged {
        iteration: usize,
        last_finite: Box<Batch>,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by user input rather than runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidConfig(_) | Error::Load(_) | Error::Json(_)
        )
    }
}
