//! Command implementations behind the `nse` binary.

pub mod artifacts;
pub mod commands;
pub mod config;

pub use commands::{cmd_count, cmd_distribution, cmd_dump_benchmark, cmd_inspect, cmd_run, RunSummary};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl From<nse_core::Error> for CliError {
    fn from(e: nse_core::Error) -> Self {
        match e {
            nse_core::Error::Config(_)
            | nse_core::Error::Space(_)
            | nse_core::Error::Resource(_)
            | nse_core::Error::UnsupportedOperation(_)
            | nse_core::Error::EnumerationCap { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}
