//! Error type shared across the crate.

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor operation was given non-conforming shapes.
    #[error("shape mismatch in `{op}`: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// Bad construction-time parameters (zero fans, odd image sizes, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called outside its contract (non-scalar loss, step past horizon, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A value left the domain an algorithm is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// A training run produced a non-finite loss and was aborted.
    #[error("training failure at step {step}: {detail}")]
    TrainingFailure { step: u64, detail: String },

    /// A file did not match its expected layout.
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
