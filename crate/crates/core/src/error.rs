use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = XpqError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum XpqError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("truncated payload: {0}")]
    Truncation(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("unknown phoneme `{symbol}` for language `{language}`")]
    Vocabulary { language: String, symbol: String },
    #[error("unknown language `{0}`")]
    UnknownLanguage(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("coverage error: {0}")]
    Coverage(String),
    #[error("task error: {0}")]
    Task(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl XpqError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        XpqError::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        XpqError::Json {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI and the C ABI.
    pub fn category(&self) -> &'static str {
        match self {
            XpqError::Io { .. } => "io",
            XpqError::Format(_) => "format",
            XpqError::Truncation(_) => "truncation",
            XpqError::Validation(_) => "validation",
            XpqError::Vocabulary { .. } | XpqError::UnknownLanguage(_) => "vocabulary",
            XpqError::Config(_) => "config",
            XpqError::Coverage(_) => "coverage",
            XpqError::Task(_) => "task",
            XpqError::Argument(_) => "argument",
            XpqError::Numeric(_) => "numeric",
            XpqError::Json { .. } => "config",
        }
    }
}
