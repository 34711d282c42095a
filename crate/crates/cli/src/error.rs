use std::path::PathBuf;

use anchorframe::evaluation::PipelineError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Problems found before any stage ran. All of them, not just the first.
    #[error("invalid configuration:{}", .0.iter().map(|e| format!("\n  - {e}")).collect::<String>())]
    Invalid(Vec<String>),
    #[error(transparent)]
    Stage(#[from] PipelineError),
    #[error("cannot write {}: {source}", path.display())]
    Output {
        path: PathBuf,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error("manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },
    #[error("missing result {}: {reason}", path.display())]
    MissingResult { path: PathBuf, reason: String },
}

impl CliError {
    pub fn output(path: impl Into<PathBuf>, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        CliError::Output {
            path: path.into(),
            source: source.into(),
        }
    }

    /// 1 for validation errors, 2 for anything that failed while running.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            _ => 2,
        }
    }
}
