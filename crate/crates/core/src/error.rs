//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value at element {0}")]
    NonFinite(usize),

    #[error("empty tensor")]
    EmptyTensor,

    #[error("sequence cache full: length {len} reached max_seq_len {max}")]
    CacheFull { len: usize, max: usize },

    #[error("decode step fed to a finished sequence (row {0})")]
    SequenceFinished(usize),

    #[error("greedy replay diverged at step {step}: recorded token {recorded}, replay produced {replayed}")]
    ReplayDivergence {
        step: usize,
        recorded: u32,
        replayed: u32,
    },

    #[error("token {0} outside vocabulary of size {1}")]
    TokenOutOfRange(u32, usize),

    #[error("character {0:?} not in vocabulary")]
    UnknownChar(char),

    #[error("model file: {0}")]
    ModelFormat(String),

    #[error("dataset file: {0}")]
    DatasetFormat(String),

    #[error("training diverged at step {0}: loss is not finite")]
    TrainingDiverged(usize),

    #[error("invalid specification: {0}")]
    InvalidSpec(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
