use std::path::PathBuf;

/// Errors raised by the conformal alignment library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}, column `{column}`: {message}")]
    Malformed {
        row: usize,
        column: String,
        message: String,
    },

    #[error("duplicate unit_id `{0}`")]
    DuplicateUnit(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("feature `{0}` unavailable: required source data is missing")]
    FeatureUnavailable(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("empty calibration set")]
    EmptyCalibration,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
