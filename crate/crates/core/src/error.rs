use std::path::PathBuf;

use thiserror::Error;

/// Errors surfaced by the library. Each variant maps onto one CLI exit code
/// class (usage, data/schema, runtime).
#[derive(Debug, Error)]
pub enum Error {
    /// The caller violated a precondition (bad argument, shape mismatch,
    /// out-of-range parameter).
    #[error("usage error: {0}")]
    Usage(String),

    /// Input data failed validation against its schema.
    #[error("schema error: {0}")]
    Schema(String),

    /// A persisted checkpoint does not match its recorded checksum or the
    /// experiment it claims to belong to.
    #[error("integrity error in {path}: {reason}")]
    Integrity { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn schema(msg: impl Into<String>) -> Self {
        Error::Schema(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data/schema, 3 runtime.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Schema(_) | Error::Integrity { .. } | Error::Json(_) | Error::Csv(_) => 2,
            Error::Io { .. } => 3,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
