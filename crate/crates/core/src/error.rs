use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("unknown entity type `{0}`")]
    UnknownType(String),

    #[error("invalid span {span} in sentence `{sentence}`: {reason}")]
    InvalidSpan {
        sentence: String,
        span: String,
        reason: String,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab})")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab: usize,
    },

    #[error("no precomputed embeddings for sentence `{0}`")]
    MissingEmbeddings(String),

    #[error("embedding shape mismatch for sentence `{sentence}`: expected {expected:?}, got {actual:?}")]
    EmbeddingShape {
        sentence: String,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("overlapping spans cannot be written as BIO: {0} and {1}")]
    Overlap(String, String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    RawIo(#[from] std::io::Error),
}

impl Error {
    /// Process exit code: 3 for failures while running, 2 for bad input.
    pub fn exit_code(&self) -> u8 {
        match self {
            Error::NonFiniteLoss { .. } | Error::RawIo(_) => 3,
            Error::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => 3,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
