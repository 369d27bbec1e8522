use std::io;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value produced at {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (max supported {supported})")]
    Version { found: u32, supported: u32 },

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("length error: {0}")]
    Length(String),

    #[error("jacobian of {rows}x{cols} exceeds the configured cap of {cap} entries")]
    JacobianTooLarge { rows: usize, cols: usize, cap: usize },

    #[error("tangent basis collapsed at step {step} (direction {direction})")]
    RankCollapse { step: usize, direction: usize },

    #[error("diverged: {0}")]
    Diverged(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
