use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] isoclr::Error),

    #[error("{0}")]
    Config(String),

    /// Missing or unreadable input file.
    #[error("{0}")]
    Input(String),

    #[error("{0}")]
    Lock(String),

    /// A core error with the file it came from.
    #[error("{context}: {source}")]
    At { context: String, source: isoclr::Error },
}

impl CliError {
    pub fn category(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Config(_) => "config",
            CliError::Input(_) => "input",
            CliError::Lock(_) => "lock",
            CliError::At { source, .. } => source.category(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub trait Context<T> {
    fn at(self, context: impl std::fmt::Display) -> Result<T, CliError>;
}

impl<T> Context<T> for isoclr::Result<T> {
    fn at(self, context: impl std::fmt::Display) -> Result<T, CliError> {
        self.map_err(|source| CliError::At {
            context: context.to_string(),
            source,
        })
    }
}
