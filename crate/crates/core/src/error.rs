use std::path::PathBuf;

use hybrid_tensor::TensorError;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("data: {0}")]
    Data(String),
    #[error("unknown ad id {0}")]
    UnknownAd(u64),
    #[error("unknown user id {0}")]
    UnknownUser(u64),
    #[error("duplicate id {0}")]
    DuplicateId(u64),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token id {id} outside vocabulary of {vocab}")]
    OutOfVocab { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("dimension mismatch: {left} vs {right}")]
    Dimension { left: usize, right: usize },
    #[error("disentanglement degree mismatch: {left} vs {right}")]
    Degree { left: usize, right: usize },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Degree { .. } => 2,
            Error::Invariant(_) => 4,
            _ => 3,
        }
    }
}
