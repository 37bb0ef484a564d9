use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// Bad configuration or input data.
    #[error("{0}")]
    Validation(String),
    /// An artifact or pin does not match what the manifest recorded.
    #[error("{0}")]
    Mismatch(String),
    #[error("{0}")]
    Runtime(String),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Validation(_) => 2,
            PipelineError::Mismatch(_) => 3,
            PipelineError::Runtime(_) => 4,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        PipelineError::Runtime(format!("{}: {e}", path.display()))
    }
}

pub(crate) fn invalid(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Validation(e.to_string())
}

pub(crate) fn runtime(e: impl std::fmt::Display) -> PipelineError {
    PipelineError::Runtime(e.to_string())
}
