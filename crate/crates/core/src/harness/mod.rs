//! Experiment configs, run logs, plots and the command implementations behind
//! the `eos` binary.

pub mod commands;
pub mod config;
pub mod plot;
pub mod runlog;

pub use commands::{CommandReport, CommandStatus};
pub use config::ExperimentConfig;
pub use runlog::{RunHeader, RunLogRow};
