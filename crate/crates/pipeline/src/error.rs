use thiserror::Error;

pub type Result<T> = std::result::Result<T, PipelineError>;

#[derive(Debug, Error)]
pub enum PipelineError {
    /// bad flags or configuration
    #[error("{0}")]
    Usage(String),

    /// a prerequisite file from an earlier step is absent
    #[error("missing input {0}")]
    Missing(String),

    #[error(transparent)]
    Core(#[from] moco_core::Error),
}

impl PipelineError {
    /// 1 usage, 2 data error, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Usage(_) => 1,
            PipelineError::Missing(_) => 2,
            PipelineError::Core(e) if e.is_numerical() => 3,
            PipelineError::Core(_) => 2,
        }
    }
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Core(moco_core::Error::Io(e))
    }
}
