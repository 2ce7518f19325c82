//! Library side of the `dvc` binary: configuration, commands and artifact
//! writers. Kept apart from `main.rs` so commands can be tested in-process.

pub mod artifacts;
pub mod commands;
pub mod config;

use dvc_core::DvcError;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] DvcError),
}

impl CliError {
    /// 2 for usage, 3 for data/integrity problems, 4 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Core(DvcError::InvalidArgument(_)) => EXIT_USAGE,
            Self::Core(DvcError::NumericDomain(_) | DvcError::NonFiniteLoss { .. }) => EXIT_NUMERIC,
            Self::Core(_) => EXIT_DATA,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
