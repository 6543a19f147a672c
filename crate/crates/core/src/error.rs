use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("invalid manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },

    #[error("validation error: {field}: {message}")]
    Validation { field: String, message: String },

    #[error("shape mismatch in {file}: {message}")]
    ShapeMismatch { file: String, message: String },

    #[error("checksum mismatch for payload of {file}: manifest says {expected}, payload hashes to {actual}")]
    ChecksumMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("unknown strategy name `{0}`")]
    UnknownStrategy(String),

    #[error("strategy `{strategy}` failed: {message}")]
    Strategy { strategy: String, message: String },

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn validation(field: &str, message: impl Into<String>) -> Self {
        Error::Validation {
            field: field.to_string(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs (as opposed to runtime failures).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::MissingFile(_)
                | Error::Manifest { .. }
                | Error::Validation { .. }
                | Error::ShapeMismatch { .. }
                | Error::ChecksumMismatch { .. }
                | Error::Config(_)
                | Error::UnknownStrategy(_)
                | Error::Analysis(_)
                | Error::Json(_)
        )
    }
}
