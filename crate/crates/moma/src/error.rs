use std::io;
use std::path::PathBuf;

/// Everything a command can fail with. `exit_code` maps each variant to the
/// process exit status.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: line {line}: {msg}")]
    Parse { path: String, line: usize, msg: String },

    #[error("{0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },

    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },

    #[error("{}: {msg}", path.display())]
    Schema { path: PathBuf, msg: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Core(#[from] moma_core::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Parse { .. } | CliError::Usage(_) => 2,
            CliError::Format { .. } | CliError::Schema { .. } => 3,
            CliError::GradCheck(_) => 4,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e.root() {
                moma_core::Error::Config(_) => 2,
                moma_core::Error::DegenerateRow { .. } => 4,
                _ => 1,
            },
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
