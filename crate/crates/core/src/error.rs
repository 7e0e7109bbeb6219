use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse { row: usize, column: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unresolved solvent names: {}", .0.join(", "))]
    Resolution(Vec<String>),

    #[error("split error: no available complete solvent of type `{0}`")]
    Split(String),

    #[error("zero variance for property `{0}` in the training fold")]
    ZeroVariance(String),

    #[error("SMILES error at byte {offset}: {message}")]
    Smiles { offset: usize, message: String },

    #[error("shape error: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (non-finite values, failed factorizations, diverged
    /// training) as opposed to bad inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Training(_) | Error::Shape(_))
    }
}
