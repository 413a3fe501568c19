use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor construction and graph operators.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: {dim} mismatch ({left} vs {right})")]
    DimMismatch {
        op: &'static str,
        dim: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
}

/// Top-level error type for everything above the tensor engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {msg}")]
    ConfigLine {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("{path}: malformed NetPBM header: {msg}")]
    MalformedHeader { path: PathBuf, msg: String },
    #[error("{path}: unsupported bit depth (maxval {maxval}, only 255 is supported)")]
    UnsupportedDepth { path: PathBuf, maxval: u32 },
    #[error("{path}: truncated pixel data ({got} of {expected} bytes)")]
    Truncated {
        path: PathBuf,
        got: usize,
        expected: usize,
    },
    #[error("image {image:?} is {image_dims:?} but mask {mask:?} is {mask_dims:?}")]
    DimensionMismatch {
        image: PathBuf,
        mask: PathBuf,
        image_dims: (usize, usize),
        mask_dims: (usize, usize),
    },
    #[error("metrics: {0}")]
    Metric(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("parameter {name}: {msg}")]
    Parameter { name: String, msg: String },
    #[error("non-finite loss {value} at step {step} (phase {phase}, epoch {epoch})")]
    NonFiniteLoss {
        step: usize,
        phase: usize,
        epoch: usize,
        value: f64,
    },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
