//! Error type carrying the process exit code: 1 usage, 2 data, 3 numeric.

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config file, contract violations (exit 1).
    Usage(String),
    /// Unreadable or malformed inputs: corpora, checkpoints, vocabularies (exit 2).
    Data(String),
    /// Non-finite numerics during training or evaluation (exit 3).
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
