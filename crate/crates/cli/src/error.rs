use std::path::PathBuf;

use thiserror::Error;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Exit code for configuration and validation errors.
pub const EXIT_CONFIG: i32 = 2;
/// Exit code when a chain diverged (partial results are still written).
pub const EXIT_DIVERGED: i32 = 3;
/// Exit code when an oracle cannot produce a reference.
pub const EXIT_ORACLE: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("chain diverged at step {step}; partial results written to {}", dir.display())]
    Diverged { step: u64, dir: PathBuf },
    #[error("oracle infeasible: {0}")]
    OracleInfeasible(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] pathlangevin::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Diverged { .. } => EXIT_DIVERGED,
            CliError::OracleInfeasible(_) => EXIT_ORACLE,
            CliError::Core(pathlangevin::Error::OracleInfeasible(_)) => EXIT_ORACLE,
            CliError::Core(pathlangevin::Error::ConditionViolated { .. }) => EXIT_CONFIG,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        CliError::Format { path: path.into(), message: message.into() }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
