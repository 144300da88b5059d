//! File formats, configuration and subcommands of the `lidarmc` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::{RunConfig, SensorsSpec};
pub use error::{CliError, Completion};
