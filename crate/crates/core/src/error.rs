use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u8 },

    #[error("truncated {format} payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        format: &'static str,
        offset: usize,
        needed: usize,
        available: usize,
    },

    #[error("malformed {format} header: {reason}")]
    MalformedHeader { format: &'static str, reason: String },

    #[error("dimension overflow: {0}")]
    DimensionOverflow(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),

    #[error("grid {height}x{width} is smaller than tile size {tile}")]
    GridTooSmall { height: usize, width: usize, tile: usize },

    #[error("negative sampling exhausted after {attempts} attempts: {achieved} of {target} fire-free tiles")]
    SamplingExhausted {
        achieved: usize,
        target: usize,
        attempts: usize,
    },

    #[error("AUC undefined: need at least one positive and one negative label ({positives} positives, {negatives} negatives)")]
    UndefinedAuc { positives: usize, negatives: usize },

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("task/architecture mismatch: {0}")]
    TaskMismatch(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
