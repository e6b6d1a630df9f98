//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidOp { op: &'static str, msg: String },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward: loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("ctc: target needs at least {needed} frames but log-probs provide {got}")]
    CtcInfeasible { needed: usize, got: usize },

    #[error("optimizer: gradient for unknown parameter '{name}'")]
    UnknownParameter { name: String },

    #[error("optimizer: gradient for frozen parameter '{name}'")]
    FrozenParameter { name: String },

    #[error("freeze: parameter '{name}' is outside the known namespaces and carries no layer index")]
    UnclassifiedParameter { name: String },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    BadConfig(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("audio of {len} samples is shorter than the frontend receptive field ({min}); pad the input")]
    AudioTooShort { len: usize, min: usize },

    #[error("stage {stage} loss weights do not match enabled tasks: {msg}")]
    WeightTaskMismatch { stage: u8, msg: String },

    #[error("cer/wer: empty reference set")]
    EmptyReferences,

    #[error("training diverged (non-finite loss) at stage {stage}, epoch {epoch}, batch {batch}")]
    Diverged { stage: u8, epoch: usize, batch: usize },

    #[error("fold {fold} failed: {source}")]
    FoldFailed {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed at byte {offset}: {msg}")]
    MalformedFile {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    #[error("manifest references missing file {path}")]
    MissingFile { path: PathBuf },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
