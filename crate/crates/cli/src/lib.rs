//! Pipeline commands behind the `covnoise` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_analyze, cmd_fetch, cmd_suppress, cmd_synth, cmd_train, load_dataset, Analysis, Outcome};
pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
