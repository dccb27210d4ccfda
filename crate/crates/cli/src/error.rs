use std::path::PathBuf;
use std::process::ExitCode;

use adr_core::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Invalid configuration, arguments or dataset location.
    #[error("{0}")]
    Config(String),

    /// Training or evaluation produced non-finite values.
    #[error("{source}{}", .snapshot.as_ref().map(|p| format!(" (state saved to {})", p.display())).unwrap_or_default())]
    Numeric {
        source: CoreError,
        snapshot: Option<PathBuf>,
    },

    #[error("cannot use checkpoint {path}: {source}")]
    Checkpoint { path: PathBuf, source: CoreError },

    #[error(transparent)]
    Core(CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Numeric { .. } => 3,
            CliError::Checkpoint { .. } => 4,
            CliError::Core(_) | CliError::Io { .. } => 1,
        })
    }

    pub fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::NonFinite(_) | CoreError::Feasibility(_) => CliError::Numeric {
                source: e,
                snapshot: None,
            },
            CoreError::Config(_)
            | CoreError::Parameter(_)
            | CoreError::Spec(_)
            | CoreError::Data(_)
            | CoreError::Dimension { .. } => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}
