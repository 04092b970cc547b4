use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed volume file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("payload holds {found} voxels but the header declares {expected}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("duplicate atlas id {0:?}")]
    DuplicateId(String),

    #[error("label {0} is not known to the model")]
    UnknownLabel(u32),

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("problem too large for exhaustive evaluation: {0}")]
    TooLarge(String),

    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Short machine-readable tag, used in the CLI's JSON error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::UnsupportedDatatype(_) => "unsupported_datatype",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::InvalidGrid(_) => "invalid_grid",
            Error::GridMismatch(_) => "grid_mismatch",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::DuplicateId(_) => "duplicate_id",
            Error::UnknownLabel(_) => "unknown_label",
            Error::EmptyLabelSet => "empty_label_set",
            Error::TooLarge(_) => "too_large",
            Error::NonFinite(_) => "non_finite",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
