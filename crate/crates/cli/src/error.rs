use phsa_core::Error as CoreError;
use thiserror::Error;

/// CLI failure classes, each with its own exit code: usage/config problems
/// exit 1, runtime failures (io, divergence) exit 2, verification failures
/// exit 3.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Config(_)
            | CoreError::Data(_)
            | CoreError::ShapeMismatch { .. }
            | CoreError::InvalidDimensions { .. }
            | CoreError::DataLength { .. }
            | CoreError::BadEpsilon(_)
            | CoreError::CheckGradeRequired => CliError::Usage(e.to_string()),
            CoreError::Io(_) | CoreError::Diverged { .. } | CoreError::NonFinite(_) => {
                CliError::Runtime(e.to_string())
            }
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
