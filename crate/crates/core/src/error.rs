use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("only one class present in {0}")]
    SingleClass(String),

    #[error("{clusters} clusters cannot fill {folds} folds")]
    TooFewClusters { clusters: usize, folds: usize },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("training diverged at epoch {epoch}: non-finite loss or weights")]
    Divergence { epoch: usize },

    #[error("numerical integration produced a non-finite state")]
    NonFiniteState,

    #[error("Platt fit did not converge (last iterate a={a}, b={b})")]
    PlattNotConverged { a: f64, b: f64 },

    #[error("ensemble member {index} failed: {source}")]
    MemberFailed {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("every grid cell failed")]
    AllCellsFailed,

    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
