use std::path::PathBuf;

use crate::types::AgentId;

/// Errors raised by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("tree has no expanded nodes")]
    EmptyTree,
    #[error("search trace has no expansions")]
    EmptyTrace,
    #[error("score {0} is outside [0, 1]")]
    InvalidScore(f64),
    #[error("no agents configured")]
    NoAgents,
    #[error("invalid task shape: {0}")]
    TaskShape(String),
    #[error("shape mismatch: expected {expected} bits, got {actual}")]
    Shape { expected: usize, actual: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("record for node {0} has no advantage assigned")]
    MissingAdvantage(usize),
    #[error("advantage for node {0} was already assigned")]
    AdvantageReassigned(usize),
    #[error("no buffer registered for agent {0}")]
    Routing(AgentId),
    #[error("empty training batch")]
    EmptyBatch,
    #[error("K = {k} out of range for N = {n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("K_max = {0} gives a zero denominator")]
    DegenerateDenominator(usize),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("remote agent protocol error: {0}")]
    Protocol(String),
    #[error("remote agent timed out after {0} ms")]
    Timeout(u64),
    #[error("remote agent returned status {status}: {body}")]
    Remote { status: u16, body: String },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("mismatched experiment setup: {0}")]
    Mismatch(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad configuration or input files rather
    /// than failures during a run.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::Parse { .. } | Error::Mismatch(_) | Error::TaskShape(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
