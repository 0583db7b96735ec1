use thiserror::Error;

/// Unified error type for the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes for an operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Invalid configuration (model geometry, axis out of range, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data content (label out of range, empty dataset, ...).
    #[error("data error: {0}")]
    Data(String),

    /// Malformed or truncated file.
    #[error("format error: {0}")]
    Format(String),

    /// Checkpoint magic/version does not match this build.
    #[error("incompatible checkpoint: {0}")]
    CheckpointIncompatible(String),

    /// backward() was called again on a graph that was already consumed.
    #[error("backward already ran on this graph; rebuild the graph before differentiating again")]
    GraphConsumed,

    /// backward() requires a scalar root.
    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarBackward(Vec<usize>),

    /// Batch-norm eval mode was requested before any train-mode pass.
    #[error("batch norm eval mode before any train-mode pass: running statistics are uninitialized")]
    UninitializedStats,

    /// Temporal aggregation over an empty sequence.
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),

    /// Non-finite loss during training.
    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },

    /// API misuse (e.g. grad_check on a non-scalar program).
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
