use std::path::PathBuf;

use peerassign::Error as CoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{stage}: missing upstream artifact {}; run `{needs}` first", path.display())]
    MissingArtifact {
        stage: &'static str,
        path: PathBuf,
        needs: &'static str,
    },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Core {
        stage: &'static str,
        #[source]
        source: CoreError,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 2 validation, 3 numeric or estimation, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::MissingArtifact { .. } | CliError::Io { .. } => 4,
            CliError::Core { source, .. } => match source {
                CoreError::Io { .. } => 4,
                CoreError::NonFinite { .. }
                | CoreError::Singular { .. }
                | CoreError::RankDeficient { .. }
                | CoreError::WeakInstrument { .. }
                | CoreError::Estimation(_)
                | CoreError::Divergence { .. } => 3,
                _ => 2,
            },
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches the stage name to library errors.
pub trait StageContext<T> {
    fn stage(self, stage: &'static str) -> CliResult<T>;
}

impl<T> StageContext<T> for peerassign::Result<T> {
    fn stage(self, stage: &'static str) -> CliResult<T> {
        self.map_err(|source| CliError::Core { stage, source })
    }
}
