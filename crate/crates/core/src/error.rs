use std::path::PathBuf;

use thiserror::Error;

/// Errors raised while reading or validating input data and run state.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: duplicate id `{id}` on lines {first_line} and {second_line}")]
    DuplicateId {
        path: PathBuf,
        id: String,
        first_line: usize,
        second_line: usize,
    },

    #[error("{path}:{line}: unknown label `{value}`")]
    UnknownLabel {
        path: PathBuf,
        line: usize,
        value: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Invalid(String),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Errors raised by model endpoints (remote, sidecar or mock).
#[derive(Debug, Error)]
pub enum ProviderError {
    #[error("transport failure talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },

    #[error("{endpoint} returned status {status}: {body}")]
    Protocol {
        endpoint: String,
        status: u16,
        body: String,
    },

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<ProviderError> },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("embedding dimension mismatch: expected {expected}, got {actual}{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    DimMismatch {
        expected: usize,
        actual: usize,
        context: Option<String>,
    },

    #[error("no {0} endpoint configured; use a score fixture file or the METEOR scorer")]
    MissingEndpoint(String),

    #[error("malformed response from {endpoint}: {message}")]
    BadResponse { endpoint: String, message: String },

    #[error("cache error: {0}")]
    Cache(String),
}

impl ProviderError {
    /// Transport hiccups, rate limiting and server-side failures are retried.
    pub fn is_transient(&self) -> bool {
        match self {
            ProviderError::Transport { .. } => true,
            ProviderError::Protocol { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

/// Top-level error for pipeline operations.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Provider(#[from] ProviderError),

    #[error("stage `{stage}` requires completed stages: {}", missing.join(", "))]
    MissingPrerequisites { stage: String, missing: Vec<String> },

    #[error("configuration changed since this run directory was created (pass --force to rerun)")]
    ConfigDrift,

    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(DataError::Io {
            path: PathBuf::new(),
            source: e,
        })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
