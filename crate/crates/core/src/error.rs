use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent layer shapes, bad architecture or invalid config values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Bad argument values passed to an operation.
    #[error("invalid input: {0}")]
    Input(String),

    /// API misuse, e.g. a backward pass with a cache from another network.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("numeric failure at layer {layer}: {detail}")]
    Numeric { layer: usize, detail: String },

    #[error("format error in {}: {detail}", path.display())]
    Format { path: PathBuf, detail: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Usage(_) => 1,
            Error::Format { .. } | Error::Io { .. } => 2,
            Error::Numeric { .. } => 3,
        }
    }
}
