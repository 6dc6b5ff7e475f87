use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },

    #[error("invalid shape for {op}: {shape:?} ({reason})")]
    InvalidShape { op: &'static str, shape: Vec<usize>, reason: String },

    #[error("invalid argument for {op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("guidance level {level}: expected shape {expected:?}, got {got:?}")]
    GuidanceShape { level: usize, expected: Vec<usize>, got: Vec<usize> },

    #[error("non-finite analytic gradient for operand {operand} at element {index}")]
    NonFiniteGradient { operand: String, index: usize },

    #[error("svt: bad magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("svt: header short ({got} of 20 bytes)")]
    HeaderShort { got: usize },

    #[error("svt: payload short: header declares {expected} bytes, found {got}")]
    PayloadShort { expected: usize, got: usize },

    #[error("svt: trailing bytes: header declares {expected} payload bytes, found {got}")]
    PayloadLong { expected: usize, got: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("missing prerequisite: stage {stage} checkpoint not found at {path}")]
    MissingStage { stage: u8, path: PathBuf },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
    }

    pub(crate) fn invalid(op: &'static str, shape: &[usize], reason: impl Into<String>) -> Self {
        Error::InvalidShape { op, shape: shape.to_vec(), reason: reason.into() }
    }

    pub(crate) fn arg(op: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidArgument { op, reason: reason.into() }
    }
}
