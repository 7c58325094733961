//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("empty attention support")]
    EmptyAttentionSupport,

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("backward already ran on this tape; rebuild the forward pass first")]
    BackwardTwice,

    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },

    #[error("reasoning step {step} out of range 1..={max}")]
    StepOutOfRange { step: usize, max: usize },

    #[error("instance is missing features for enabled modality {0}")]
    MissingModality(&'static str),

    #[error("empty sequence")]
    EmptySequence,

    #[error("empty batch")]
    EmptyBatch,

    #[error("question has no {0} candidates")]
    NoCandidates(&'static str),

    #[error("combination requires exactly 3 incorrect candidates, got {0}")]
    MalformedCombination(usize),

    #[error("instance index {index} out of range (count {count})")]
    IndexOutOfRange { index: usize, count: usize },

    #[error("invalid split fraction {0}")]
    InvalidFraction(f64),

    #[error("duplicate array name `{0}` in bundle")]
    DuplicateName(String),

    #[error("not a MACX bundle")]
    BadMagic,

    #[error("unsupported bundle version {0}")]
    UnknownVersion(u32),

    #[error("corrupt bundle: {0}")]
    CorruptBundle(String),

    #[error("config error for key `{key}`: {reason}")]
    Config { key: String, reason: String },

    #[error("checkpoint does not match requested configuration: {0}")]
    CheckpointMismatch(String),

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    TrainDiverged { epoch: usize, batch: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
