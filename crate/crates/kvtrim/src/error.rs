use std::path::PathBuf;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("numerical check failed: {0}")]
    Check(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Engine(#[from] kvtrim_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use kvtrim_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Check(_) => 3,
            CliError::Io { .. } => 1,
            CliError::Engine(E::NoConvergence { .. }) => 3,
            CliError::Engine(E::Format(_)) => 1,
            // every other engine error is a shape or precondition the config led to
            CliError::Engine(_) => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
