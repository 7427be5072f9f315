use std::path::PathBuf;

use thiserror::Error;

use crate::trainer::TrainState;
use crate::ttt::TttReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{0}: degenerate input (zero norm)")]
    Degenerate(&'static str),

    #[error("fold: query {index} does not share the trigger column of query 0")]
    InconsistentFold { index: usize },

    #[error("fold: no queries to fold")]
    EmptyFold,

    #[error("running average read before any column was fired")]
    EmptyAverage,

    #[error("optimizer: non-finite gradient in `{tensor}`")]
    NonFiniteGradient { tensor: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{what}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        what: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{what}: truncated, needed {needed} bytes but only {available} remain")]
    Truncated {
        what: String,
        needed: usize,
        available: usize,
    },

    #[error("{what}: unsupported version {found} (expected {expected})")]
    Version {
        what: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("invalid bundle {}: {reason}", path.display())]
    Bundle { path: PathBuf, reason: String },

    #[error("invalid manifest {}: line {line}: {reason}", path.display())]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("test-time training diverged: non-finite loss at iteration {iteration}")]
    TttDiverged {
        iteration: usize,
        report: Box<TttReport>,
    },

    #[error("training diverged: non-finite loss at step {step}")]
    TrainDiverged {
        step: u64,
        last_good: Box<TrainState>,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
