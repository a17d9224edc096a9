//! Error type shared by every module of the engine.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad invocation or configuration.
    Usage,
    /// Malformed or inconsistent data on disk or in memory.
    Data,
    /// Model client, transport or server failure.
    Client,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("no records")]
    NoRecords,

    #[error("no test items")]
    NoTestItems,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("embedding contains a non-finite value")]
    NonFinite,

    #[error("cosine similarity is undefined for a zero vector")]
    ZeroVector,

    #[error("embedding index is empty")]
    EmptyIndex,

    #[error("unknown candidate id: {0}")]
    UnknownCandidate(String),

    #[error("index file: bad magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("index file: unsupported version {0}")]
    UnsupportedVersion(u32),

    #[error("index file truncated while reading {0}")]
    Truncated(&'static str),

    #[error("index file: {0} trailing bytes after last entry")]
    TrailingBytes(usize),

    #[error("index file: {0}")]
    CorruptIndex(String),

    #[error("candidate {id}: {source}")]
    Candidate {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("transport error: {0}")]
    Transport(String),

    #[error("request timed out")]
    Timeout,

    #[error("server returned {status}: {message}")]
    Http { status: u16, message: String },

    #[error("unsupported by server: {0}")]
    Unsupported(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("empty generation")]
    EmptyGeneration,

    #[error("empty summary")]
    EmptySummary,

    #[error("invalid trace: {0}")]
    InvalidTrace(String),

    #[error("invalid prompt: {0}")]
    InvalidPrompt(String),

    #[error("budget of {budget} tokens is below the {template} tokens of the bare template")]
    BudgetTooSmall { budget: usize, template: usize },

    #[error("order policy: {0}")]
    Order(String),

    #[error("unlearning: {0}")]
    Unlearning(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn for_candidate(id: impl Into<String>, source: Error) -> Self {
        Error::Candidate {
            id: id.into(),
            source: Box::new(source),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorKind::Usage,
            Error::Transport(_)
            | Error::Timeout
            | Error::Http { .. }
            | Error::Unsupported(_)
            | Error::Protocol(_)
            | Error::EmptyGeneration
            | Error::EmptySummary => ErrorKind::Client,
            Error::Candidate { source, .. } => source.kind(),
            _ => ErrorKind::Data,
        }
    }

    /// Whether a request that failed with this error may be retried.
    pub fn is_retryable(&self) -> bool {
        match self {
            Error::Transport(_) | Error::Timeout => true,
            Error::Http { status, .. } => *status >= 500,
            _ => false,
        }
    }
}
