//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box: {0}")]
    InvalidBox(String),

    #[error("box ({0:.1},{1:.1},{2:.1},{3:.1}) not fully inside {4}x{5} image")]
    OutsideImage(f64, f64, f64, f64, u32, u32),

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("{what}: expected dimension {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid value for `{field}`: {message}")]
    InvalidField { field: String, message: String },

    #[error("attention row {0} has no valid keys")]
    AllKeysMasked(usize),

    #[error("embedding is not unit-norm (|v| = {0})")]
    NotNormalized(f64),

    #[error("sequence length {len} exceeds encoder context {max}")]
    ContextOverflow { len: usize, max: usize },

    #[error("config `{path}` line {line}: {message}")]
    ConfigParse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing parameter `{0}` (was it stripped from the checkpoint?)")]
    MissingParam(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Convenience constructor for field-level validation failures.
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidField {
            field: field.into(),
            message: message.into(),
        }
    }

    /// True for errors the CLI reports as validation failures (exit code 1)
    /// rather than runtime failures (exit code 2).
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::Io(_) | Error::Checkpoint(_) | Error::MissingParam(_)
        )
    }
}
