use std::path::PathBuf;

/// Errors from reading or writing THW1 containers.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("bad magic: expected \"THW1\"")]
    BadMagic,
    #[error("file truncated: {0}")]
    Truncated(String),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor {tensor}: {reason}")]
    Tensor { tensor: String, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Engine(#[from] highlighter_core::Error),
    #[error("{0}")]
    Usage(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
