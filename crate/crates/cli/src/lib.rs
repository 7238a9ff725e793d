//! Experiment orchestration for the test-time adaptation benchmarks: config
//! parsing, source training, (method × seed) runs, ablations, sweeps and
//! metric files.

pub mod config;
pub mod harness;

/// Error split by exit code: configuration problems exit with 1, anything
/// that fails while running exits with 2.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<tta_core::Error> for CliError {
    fn from(e: tta_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}
