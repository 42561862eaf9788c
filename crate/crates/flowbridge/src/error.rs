use thiserror::Error;

use flowbridge_core::Error as CoreError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("schema: {0}")]
    Schema(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 2 config/schema, 3 numerical divergence, 4 checkpoint mismatch, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Schema(_) | CliError::Csv(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Json(_) | CoreError::Io(_) | CoreError::Empty(_) => 2,
                CoreError::Diverged(_) => 3,
                CoreError::CheckpointMismatch(_) => 4,
                _ => 1,
            },
        }
    }
}
