use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Data { path: PathBuf, line: u64, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            CliError::Io { .. } | CliError::Data { .. } | CliError::Invalid(_) => 2,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn data(path: &Path, line: u64, message: impl Into<String>) -> Self {
        CliError::Data { path: path.to_path_buf(), line, message: message.into() }
    }

    pub fn config(path: &Path, message: impl Into<String>) -> Self {
        CliError::Config { path: path.to_path_buf(), message: message.into() }
    }
}

/// Successful completion, possibly with skipped windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Completion {
    Full,
    Partial,
}

impl Completion {
    pub fn exit_code(&self) -> i32 {
        match self {
            Completion::Full => 0,
            Completion::Partial => 3,
        }
    }
}
