use std::process::ExitCode;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum CliError {
    /// At least one verification check failed.
    #[error("verification failed: {0}")]
    Failed(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Io(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Self::Failed(_) => 1,
            Self::Config(_) => 2,
            Self::Io(_) => 3,
        })
    }
}

/// Core errors reaching the front end are configuration problems: every
/// input has been validated, so what remains is an unsupported combination
/// (budget exceeded, missing constant, wrong target family).
impl From<dynhmc::Error> for CliError {
    fn from(e: dynhmc::Error) -> Self {
        Self::Config(e.to_string())
    }
}
