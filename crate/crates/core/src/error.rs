use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?} ({reason})")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: &'static str,
    },

    #[error("input too short: {len} samples, kernel needs at least {kernel}")]
    InputTooShort { len: usize, kernel: usize },

    #[error("sequence too long: length {len} exceeds projection capacity {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },

    #[error("invalid chunk size {0}: must be even and at least 2")]
    InvalidChunkSize(usize),

    #[error("invalid attention spec: {0}")]
    InvalidAttention(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },

    #[error("target signal has zero energy; metric undefined")]
    UndefinedTarget,

    #[error("signal length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("source count mismatch: {estimates} estimates vs {targets} targets")]
    SourceCountMismatch { estimates: usize, targets: usize },

    #[error("permutation search supports at most 3 sources, got {0}")]
    TooManySources(usize),

    #[error("speed factor {0} outside [0.95, 1.05]")]
    SpeedOutOfRange(f64),

    #[error("source pool has {have} signals, need {need}")]
    PoolTooSmall { have: usize, need: usize },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("unsupported wav {field}: {value}")]
    UnsupportedWav { field: &'static str, value: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
