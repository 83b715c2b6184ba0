use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] covnoise::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error on {0}: {1}")]
    Io(PathBuf, #[source] std::io::Error),
    #[error("lineage mismatch: checkpoint was produced by config {found}, current config is {expected}")]
    Lineage { expected: String, found: String },
    #[error("missing argument: {0}")]
    MissingArgument(&'static str),
}

pub type CliResult<T> = std::result::Result<T, CliError>;
