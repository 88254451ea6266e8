use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("empty mask: {0}")]
    EmptyMask(&'static str),

    #[error("zero-norm prototype")]
    ZeroPrototype,

    #[error("episode sampling failed: {0}")]
    Sampling(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown {kind} `{name}` (known: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
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

    /// Short machine-readable category, used by the CLI on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Format { .. } => "format",
            Error::Invalid(_) => "invalid",
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::EmptyMask(_) => "empty-mask",
            Error::ZeroPrototype => "zero-prototype",
            Error::Sampling(_) => "sampling",
            Error::Config(_) => "config",
            Error::Unknown { .. } => "unknown-name",
        }
    }
}
