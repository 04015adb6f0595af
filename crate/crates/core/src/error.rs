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

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no valid sequences in {path} ({rejected_rows} rows rejected)")]
    EmptyDataset { path: PathBuf, rejected_rows: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("sequence too short: {len} keystrokes, need at least 2")]
    TooShort { len: usize },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("numerical divergence: {0}")]
    NumericalDivergence(String),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("corrupted checkpoint: {0}")]
    Integrity(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status used by the command-line tool.
    ///
    /// `2` is reserved for usage errors (reported by the argument parser).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Domain(_) => 2,
            Error::Io { .. }
            | Error::Schema(_)
            | Error::EmptyDataset { .. }
            | Error::TooShort { .. }
            | Error::Protocol(_) => 3,
            Error::NumericalDivergence(_) => 4,
            Error::Incompatible(_) | Error::Integrity(_) => 5,
        }
    }
}
