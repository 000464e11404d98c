use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: not found")]
    NotFound { path: PathBuf },

    #[error("volume file holds {found} bytes, dims require {expected}")]
    SizeMismatch { expected: u64, found: u64 },

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("invalid volume metadata: {0}")]
    Metadata(String),

    #[error("cannot normalize a constant volume")]
    ConstantVolume,

    #[error("coordinate ({}, {}, {}) lies outside [-1, 1]^3", .0[0], .0[1], .0[2])]
    OutOfDomain([f64; 3]),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("step {step} outside {lo}..={hi}")]
    StepOutOfRange { step: usize, lo: usize, hi: usize },

    #[error("non-finite loss at step {step} (lambda = {lambda}, member = {member}, var = {var})")]
    NonFiniteLoss {
        step: usize,
        lambda: f64,
        member: f64,
        var: f64,
    },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("correlation undefined for a constant field")]
    UndefinedCorrelation,

    #[error("degenerate camera: {0}")]
    DegenerateCamera(String),

    #[error("image encoding failed: {0}")]
    Image(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound { path }
        } else {
            Error::Io { path, source }
        }
    }
}
