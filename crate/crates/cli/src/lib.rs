//! Experiment runner behind the `qinn` binary.

pub mod commands;
pub mod config;
pub mod hashing;
pub mod report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    /// 2 for anything the caller can fix by changing inputs, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Data(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}
