use std::path::PathBuf;

use thiserror::Error;

/// Every failure the pipeline can report.
///
/// The variants line up with the process exit codes used by the `dp` binary:
/// usage-type problems exit with 1, dataset/IO problems with 2 and broken
/// invariants (non-finite values, mutated frozen parameters, exploding
/// simulations) with 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("data error: {context}: {path}")]
    MissingFile { context: String, path: PathBuf },

    #[error("simulation error: {0}")]
    Simulation(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Dimension(_) | Error::Index(_) | Error::Usage(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::MissingFile { .. } | Error::Io { .. } => 2,
            Error::Simulation(_) | Error::NonFinite(_) | Error::Invariant(_) => 3,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::Error::Dimension(format!($($arg)*)) };
}
pub(crate) use dim_err;
