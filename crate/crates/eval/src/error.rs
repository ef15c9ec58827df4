use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prompt set line {line}: {reason}")]
    PromptLine { line: usize, reason: String },
    #[error("prompt set contains no cases")]
    EmptyPromptSet,
    #[error("invalid case: {0}")]
    Case(String),
    #[error("no parseable transcripts to score")]
    NoParseable,
    #[error("endpoint rejected credentials: {0}")]
    Auth(String),
    #[error("endpoint configuration: {0}")]
    Endpoint(String),
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

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;
