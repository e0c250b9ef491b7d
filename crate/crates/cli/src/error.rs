//! CLI errors and their exit codes.

use rlcp_core::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad configuration, arguments or inputs that fail validation (exit 2).
    #[error("{0}")]
    Config(String),
    /// Training or evaluation failed numerically (exit 3).
    #[error("{0}")]
    Runtime(String),
    /// A file could not be read, decoded or written (exit 4).
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match e {
            Error::Io { .. } | Error::Image { .. } | Error::Format { .. } | Error::Checkpoint(_) => CliError::Io(msg),
            Error::NonFinite(_) => CliError::Runtime(msg),
            Error::Validation(_)
            | Error::Shape { .. }
            | Error::Dimension { .. }
            | Error::InvalidArgument(_)
            | Error::Lookup(_)
            | Error::Incompatible(_) => CliError::Config(msg),
        }
    }
}

pub fn io_err(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}
