use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid task, suite, or training configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An API was called out of sequence (stepping a finished episode, scoring
    /// an unfinished one, mismatched lengths).
    #[error("usage error: {0}")]
    Usage(String),

    /// A gradient, loss or parameter went non-finite.
    #[error("numerical error: {0}")]
    NonFinite(String),

    /// Malformed serialized data.
    #[error("corrupt data at byte {position}: {message}")]
    Corrupt { position: usize, message: String },

    #[error("missing run directory {0}")]
    MissingRun(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record in {path} line {line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the error category.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::Config(_) => 2,
            Error::Usage(_) => 3,
            Error::NonFinite(_) => 4,
            Error::Corrupt { .. } | Error::Record { .. } => 5,
            Error::MissingRun(_) | Error::Io { .. } => 6,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
