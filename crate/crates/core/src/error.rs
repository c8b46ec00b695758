use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, DennError>;

#[derive(Debug, Error)]
pub enum DennError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl DennError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DennError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        DennError::Dimension(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        DennError::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        DennError::Config(msg.into())
    }

    /// Process exit status used by the command-line tool, one per error class.
    /// 1 is left for a failed gradient check and 2 for usage errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            DennError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
            DennError::Io { .. } => 4,
            DennError::Parse { .. } => 5,
            DennError::Config(_) => 6,
            DennError::Dimension(_) => 7,
            DennError::InvalidInput(_) => 8,
            DennError::Format(_) => 9,
        }
    }
}
