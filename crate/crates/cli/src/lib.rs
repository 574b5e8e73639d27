//! Config loading and subcommand runners behind the `swflow` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_barycenter, cmd_fair, cmd_gmm_flow, exit_code, Log, Outcome};
pub use config::{ModeSelection, RunConfigFile};
