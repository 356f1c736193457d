//! Stage-tagged errors for the command-line pipeline.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("ingestion: {0}")]
    Ingestion(String),
    #[error("train: {0}")]
    Train(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CliError>;
