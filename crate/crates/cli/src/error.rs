use thiserror::Error;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] staer_core::Error),

    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },

    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Self::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 for configuration, 3 for data, 4 for numerical failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        use staer_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Invalid { .. } | E::Json(_) => 2,
                E::Dataset(_) | E::Format { .. } | E::BadMagic { .. } => 3,
                E::NonFinite { .. } => 4,
                _ => 1,
            },
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }
}
