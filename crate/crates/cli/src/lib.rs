//! Command-line front end: role entry points, the experiment orchestrator
//! and the I/O benchmark behind the `shipnet` binary.

pub mod bench;
pub mod config;
pub mod error;
pub mod run;

pub use config::{Mode, RunConfig};
pub use error::{CliError, CliResult};
