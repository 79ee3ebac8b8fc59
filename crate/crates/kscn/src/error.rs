//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the clustering, linear-algebra, and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or an out-of-range dimension request.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A matrix that must have full column rank does not.
    #[error("rank deficient: {0}")]
    RankDeficient(String),

    /// NaN or infinity where only finite values are admitted.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A cluster lost all of its members and could not be repaired.
    #[error("cluster {0} is empty")]
    EmptyCluster(usize),

    /// Inconsistent or out-of-range configuration.
    #[error("invalid config: {0}")]
    Config(String),

    /// Malformed file contents (bad magic, truncated payload, count mismatch).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
