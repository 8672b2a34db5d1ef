use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("missing artifact '{name}' at {}", path.display())]
    MissingArtifact { name: String, path: PathBuf },
    #[error("stale artifact '{name}': stored hash {expected}, file hash {actual}")]
    StaleArtifact { name: String, expected: String, actual: String },
    #[error("artifact '{name}': {reason}")]
    BadArtifact { name: String, reason: String },
    #[error("{phase} phase failed: {source}")]
    Phase {
        phase: &'static str,
        #[source]
        source: fsw_core::Error,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub mod exit_code {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const ARTIFACT: i32 = 3;
    pub const NUMERIC: i32 = 4;
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => exit_code::CONFIG,
            Self::Phase { source: fsw_core::Error::InvalidConfig(_), .. } => exit_code::CONFIG,
            Self::MissingArtifact { .. } | Self::StaleArtifact { .. } | Self::BadArtifact { .. } => exit_code::ARTIFACT,
            Self::Phase { .. } => exit_code::NUMERIC,
            Self::Io { .. } | Self::Csv(_) => exit_code::OTHER,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }
}

/// Attaches a phase name to a core error.
pub trait PhaseExt<T> {
    fn phase(self, phase: &'static str) -> Result<T, CliError>;
}

impl<T> PhaseExt<T> for fsw_core::Result<T> {
    fn phase(self, phase: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Phase { phase, source })
    }
}
