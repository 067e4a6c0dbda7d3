use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the optimizer, meta-trainer, testbeds and bounds.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid block partition: {0}")]
    InvalidPartition(String),

    #[error("partition mismatch: expected {expected} {what}, got {actual}")]
    PartitionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid perturbation scale for block {block}: {value}")]
    InvalidScale { block: usize, value: f64 },

    #[error("block index {index} out of range for {len} blocks")]
    BlockIndex { index: usize, len: usize },

    #[error("non-finite value during {context}")]
    NumericOverflow { context: String },

    #[error("non-finite {sign} loss {value} in two-point estimate")]
    NonFiniteLoss { sign: &'static str, value: f64 },

    #[error("pertnn block {block}: {reason}")]
    PertNN { block: usize, reason: String },

    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error("divergence at step {step}: loss {loss} exceeds {limit}")]
    Divergence { step: usize, loss: f64, limit: f64 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate bound: {0}")]
    DegenerateBound(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Checkpoint load failures, one variant per way a file can be malformed.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("io error on {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("magic mismatch: expected {expected:?}, found {found:?}")]
    MagicMismatch { expected: &'static str, found: String },

    #[error("line {line}: malformed header: {message}")]
    BadHeader { line: usize, message: String },

    #[error("line {line}: expected {expected} values, found {found}")]
    DimensionMismatch {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("line {line}: cannot parse {token:?} as a number")]
    BadNumber { line: usize, token: String },

    #[error("truncated checkpoint: declared {declared} blocks, found {found}")]
    Truncated { declared: usize, found: usize },

    #[error("line {line}: trailing content after last block")]
    TrailingContent { line: usize },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
