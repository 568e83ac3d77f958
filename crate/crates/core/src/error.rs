use std::io;
use std::path::{Path, PathBuf};

use crate::token_index::TokenId;

/// Errors raised anywhere in the retrieval and generation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u64, vocab_size: u32 },

    #[error("invalid token sequence for `{id}`: {message}")]
    InvalidSequence { id: String, message: String },

    #[error("database is empty")]
    EmptyDatabase,

    #[error("trie is empty")]
    EmptyTrie,

    #[error("prompt is empty")]
    EmptyPrompt,

    #[error("empty input")]
    EmptyInput,

    #[error("row for context {context:?} has no probability mass")]
    NonNormalizable { context: Option<Vec<TokenId>> },

    #[error("word `{0}` is not in the tokenizer vocabulary")]
    UnknownWord(String),

    #[error("operation not supported: {0}")]
    Unsupported(&'static str),

    #[error("transport error: {0}")]
    Transport(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("timed out waiting for scorer reply")]
    Timeout,

    #[error("scorer reported `{code}`: {message}")]
    Remote { code: String, message: String },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("length mismatch: {left} results vs {right} queries")]
    LengthMismatch { left: usize, right: usize },

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("query vector has zero norm")]
    DegenerateQuery,

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("{}: {source}", path.display())]
    File { path: PathBuf, source: io::Error },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn file(path: &Path, source: io::Error) -> Self {
        Error::File {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
