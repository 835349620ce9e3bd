use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("unsupported audio: {0}")]
    UnsupportedAudio(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error at `{path}`: {detail}")]
    Config { path: String, detail: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Autodiff(#[from] mirssl_autodiff::AutodiffError),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        CoreError::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        CoreError::InvalidInput(detail.into())
    }

    /// Configuration problems are usage errors; everything else is a data error.
    pub fn is_usage(&self) -> bool {
        matches!(self, CoreError::Config { .. })
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
