use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the toolkit can report. Variants mirror the failure kinds of
/// the individual stages so callers can branch on them.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("undefined statistic: {0}")]
    Undefined(String),
    #[error("shape mismatch: {0}")]
    ShapeError(String),

    #[error("format error: {0}")]
    FormatError(String),
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("checksum mismatch for {path}: expected {expected}, got {actual}")]
    ChecksumError {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("network error: {0}")]
    NetworkError(String),
    #[error("class {class} has {available} samples, {requested} requested")]
    InsufficientClassData {
        class: usize,
        available: usize,
        requested: usize,
    },
    #[error("batch shape error: {0}")]
    BatchShapeError(String),
    #[error("pairing error: {0}")]
    PairingError(String),

    #[error("numerical overflow: {0}")]
    NumericalOverflow(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("degenerate activity for sample {0}: focal input is the zero vector")]
    DegenerateActivity(usize),
    #[error("training diverged at epoch {epoch}: {reason}")]
    DivergenceError { epoch: usize, reason: String },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("insufficient pairs: {0}")]
    InsufficientPairs(String),
    #[error("empty Hessian: every sample was degenerate")]
    EmptyHessian,
    #[error("degenerate covariance: {0}")]
    DegenerateCovariance(String),
    #[error("invalid spikes: {0}")]
    InvalidSpikes(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("stiff set is empty; homogenization needs at least one stiff sample")]
    EmptyStiffSet,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
