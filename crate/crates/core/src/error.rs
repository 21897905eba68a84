use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("duplicate variant ({arch}, {opt}, {obf}) in group {group_id}")]
    DuplicateVariant {
        group_id: String,
        arch: String,
        opt: String,
        obf: String,
    },

    #[error("duplicate instance id {0}")]
    DuplicateInstance(String),

    #[error("group {0} not pair-eligible")]
    NotPairEligible(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("non-finite activation")]
    NonFiniteActivation,

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    /// Both coordinates are 1-based.
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("not a checkpoint")]
    NotACheckpoint,

    #[error("not an index file")]
    NotAnIndex,

    #[error("unsupported format version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("duplicate id {0}")]
    DuplicateId(String),

    #[error("unknown id {0}")]
    UnknownId(String),

    #[error("embedding for {id} is not unit norm (norm {norm})")]
    NotUnitNorm { id: String, norm: f64 },

    #[error("invalid pool {index}: {reason}")]
    InvalidPool { index: usize, reason: String },

    #[error("at batch index {index}: {source}")]
    AtIndex {
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Numerical blow-up rather than bad input.
    pub fn is_non_finite(&self) -> bool {
        match self {
            Error::NonFiniteActivation | Error::NonFiniteGradient(_) | Error::NonFiniteLoss { .. } => true,
            Error::AtIndex { source, .. } => source.is_non_finite(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
