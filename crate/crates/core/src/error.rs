use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),

    #[error("matrix is not invertible after {escalations} jitter escalations")]
    NotInvertible { escalations: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("update contains non-finite values: {0}")]
    NonFiniteUpdate(String),

    #[error("distribution family mismatch: {0}")]
    FamilyMismatch(String),

    #[error("inverse is stale: {steps} steps since refresh, interval is {interval}")]
    StaleInverse { steps: usize, interval: usize },

    #[error("quadratic form is negative ({0:e}); curvature is not positive definite")]
    NegativeForm(f64),

    #[error("environment fault: {0}")]
    EnvFault(String),

    #[error("oracle refuses models with {params} parameters (limit {limit})")]
    TooManyParams { params: usize, limit: usize },

    #[error("invalid config key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("run in {0} is incomplete")]
    IncompleteRun(PathBuf),

    #[error("malformed {what}: {reason}")]
    Parse { what: String, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimensionMismatch(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
