use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AqpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid rectangle: lo[{dim}] = {lo} > hi[{dim}] = {hi}")]
    InvalidRectangle { dim: usize, lo: f64, hi: f64 },

    #[error("tuple id {0} is already live")]
    DuplicateId(u64),

    #[error("tuple id {0} is not live")]
    MissingId(u64),

    #[error("requested {requested} samples but only {available} live tuples")]
    NotEnoughTuples { requested: usize, available: usize },

    #[error("aggregate over an empty selection")]
    EmptySelection,

    #[error("query cannot be answered from the synopsis: {0}")]
    Unanswerable(String),

    #[error("too few samples: need at least {needed}, have {have}")]
    TooFewSamples { needed: usize, have: usize },

    #[error("sample {0} already indexed")]
    DuplicateSample(u64),

    #[error("sample {0} not indexed")]
    MissingSample(u64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("engine is blocked while node statistics are populated")]
    Blocked,
}

pub type Result<T, E = AqpError> = std::result::Result<T, E>;
