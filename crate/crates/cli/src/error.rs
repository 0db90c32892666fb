//! Driver-level errors, each carrying the process exit code of its class.

use musim_io::IoError;
use musim_runtime::RuntimeError;
use std::fmt::Display;
use thiserror::Error;

/// Exit codes: 2 for configuration problems, 3 for solver failures, 4 for
/// dataset and filesystem problems. 0 is success.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("io error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(msg: impl Display) -> Self {
        Self::Config(msg.to_string())
    }

    pub fn solver(msg: impl Display) -> Self {
        Self::Solver(msg.to_string())
    }

    pub fn io(msg: impl Display) -> Self {
        Self::Io(msg.to_string())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Solver(_) => 3,
            Self::Io(_) => 4,
        }
    }
}

impl From<RuntimeError> for CliError {
    fn from(e: RuntimeError) -> Self {
        match e {
            // Shape and layout problems trace back to the scenario config.
            RuntimeError::Infeasible(_) | RuntimeError::ShapeMismatch(_) => Self::config(e),
            other => Self::solver(other),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        Self::io(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::io(e)
    }
}
