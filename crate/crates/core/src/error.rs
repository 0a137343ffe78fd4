use thiserror::Error;

use crate::engine::ScheduleViolation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid schedule: {0}")]
    Schedule(#[from] ScheduleViolation),

    #[error("depth unreachable: {depth} from {physical} physical layers ({foldable} foldable)")]
    DepthUnreachable {
        physical: usize,
        depth: usize,
        foldable: usize,
    },

    #[error("target too long: {frames} frames cannot align a target needing {required}")]
    TargetTooLong { frames: usize, required: usize },

    #[error("index {index} out of vocabulary of size {vocab}")]
    OutOfVocabulary { index: usize, vocab: usize },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
