use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the stylization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("index out of bounds: {0}")]
    Bounds(String),
    #[error("unknown style `{0}`")]
    Lookup(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("integrity check failed for `{entry}`: {reason}")]
    Integrity { entry: String, reason: String },
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Coarse machine-parseable class used by the command-line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Numeric(_) => "numeric",
            Error::Integrity { .. } => "integrity",
            Error::Io { .. } | Error::Image(_) => "io",
            Error::Shape(_)
            | Error::Argument(_)
            | Error::Bounds(_)
            | Error::Lookup(_)
            | Error::Config(_) => "config",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn integrity(entry: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Integrity {
            entry: entry.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! arg_err {
    ($($arg:tt)*) => { $crate::error::Error::Argument(format!($($arg)*)) };
}
pub(crate) use arg_err;
pub(crate) use shape_err;
