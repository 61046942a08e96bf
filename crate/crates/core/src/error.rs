use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    /// The operation is undefined at the zero vector (e.g. the dual map of a zero gradient).
    #[error("zero vector: {0}")]
    ZeroVector(&'static str),

    #[error("non-finite value encountered: {0}")]
    NonFinite(&'static str),

    /// Parameters left the finite range; callers treat this as divergence rather than a crash.
    #[error("iterate diverged")]
    Diverged,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("data corruption: {0}")]
    Corrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
