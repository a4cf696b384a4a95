use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage `{stage}` must run first: missing {}", path.display())]
    Dependency { stage: &'static str, path: PathBuf },
    #[error("I/O error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] mvscan_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    /// 2 for bad input or configuration, 3 for a missing upstream stage,
    /// 4 for failures while training or scoring.
    pub fn exit_code(&self) -> i32 {
        use mvscan_core::Error as E;
        match self {
            CliError::Dependency { .. } => 3,
            CliError::Core(E::Training(_) | E::Nn(_) | E::NoResult(_) | E::Domain(_) | E::UndefinedAuc(_) | E::Calibration) => 4,
            _ => 2,
        }
    }
}
