use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// The host is missing something (simulator binary, API key, ...).
    #[error("environment error: {0}")]
    Environment(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("trace parse error at line {line}: {message}")]
    TraceParse { line: usize, message: String },

    #[error("schema violation in {path}: field `{field}`: {message}")]
    Schema {
        path: PathBuf,
        field: String,
        message: String,
    },

    #[error("no candidate produced an ok trace for problem {0}")]
    NoOkCandidates(String),

    #[error("no valid testbench for problem {problem} after {attempts} attempts")]
    TestbenchUnavailable { problem: String, attempts: u32 },

    #[error("internal consistency error: {0}")]
    Internal(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Failures reported by an LLM backend.
#[derive(Debug, Error)]
pub enum BackendError {
    /// Network hiccup, rate limit or 5xx; the request may succeed later.
    #[error("transport error (retryable): {0}")]
    Transport(String),

    /// Replay fixtures ran out for a tag.
    #[error("fixture exhausted for tag `{0}`")]
    FixtureExhausted(String),

    #[error("backend rejected request: {0}")]
    Rejected(String),

    #[error("malformed backend response: {0}")]
    Malformed(String),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}
