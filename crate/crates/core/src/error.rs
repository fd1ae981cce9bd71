use std::io;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("node id {id} out of range for vocabulary of size {n}")]
    NodeOutOfRange { id: u32, n: usize },

    #[error("sequence length {len} outside [{min}, {max}]")]
    SequenceLength { len: usize, min: usize, max: usize },

    #[error("temperature must be positive and finite, got {0}")]
    Temperature(f64),

    #[error("computation record is stale: recorded at revision {recorded}, model is at {current}")]
    StaleRecord { recorded: u64, current: u64 },

    #[error("gradient/optimizer shape mismatch: {0}")]
    Shape(String),

    #[error("training diverged: non-finite loss or gradient at step {step}")]
    Diverged { step: u64 },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("vocabulary: {0}")]
    Vocab(String),

    #[error("bad magic bytes in {0}")]
    BadMagic(String),

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
