use std::path::PathBuf;

use prunelab_core::Error as CoreError;
use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("missing artifact {}: run `{stage}` first", path.display())]
    Missing { path: PathBuf, stage: &'static str },

    /// The artifact exists but was produced under a different config.
    #[error("artifact {} belongs to config {found}, expected {expected}", path.display())]
    Stale {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] CoreError),
}

impl CliError {
    /// Process exit status for this failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Missing { .. } | CliError::Stale { .. } => 3,
            CliError::Numeric(_) => 4,
            CliError::Core(CoreError::Numeric(_) | CoreError::Degenerate(_)) => 4,
            CliError::Core(CoreError::Format { .. }) => 3,
            CliError::Core(CoreError::Argument(_)) => 2,
            CliError::Io { .. } | CliError::Core(CoreError::Io(_)) => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        let missing = CliError::Missing {
            path: "a".into(),
            stage: "gen",
        };
        assert_eq!(missing.exit_code(), 3);
        assert!(missing.to_string().contains("run `gen` first"));
        assert_eq!(CliError::Numeric("x".into()).exit_code(), 4);
        assert_eq!(CliError::Core(CoreError::Numeric("x".into())).exit_code(), 4);
        assert_eq!(CliError::io("p", std::io::Error::other("x")).exit_code(), 1);
    }
}
