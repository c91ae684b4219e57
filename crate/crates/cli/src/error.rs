use thiserror::Error;
use ztprune::ErrorCategory;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] ztprune::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// 3 config, 4 input, 5 numerical, 1 anything I/O. Usage errors (2) are
    /// raised by the argument parser before a command runs.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 3,
            CliError::Input(_) => 4,
            CliError::Io(_) => 1,
            CliError::Core(e) => match e.category() {
                ErrorCategory::Config => 3,
                ErrorCategory::Input => 4,
                ErrorCategory::Numerical => 5,
                ErrorCategory::Io => 1,
            },
        }
    }
}
