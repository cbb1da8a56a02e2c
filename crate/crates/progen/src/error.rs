use std::path::PathBuf;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] progen_core::Error),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: line {line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}: line {line}: expected {expected} columns, found {found}", path.display())]
    ColumnCountMismatch {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint version mismatch: {0}")]
    VersionMismatch(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptPayload(String),
    #[error("verification failed: {0}")]
    SuiteFailure(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 0 success, 1 usage or config error, 2 numerical divergence,
    /// 3 verification failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(progen_core::Error::Diverged { .. })
            | CliError::Core(progen_core::Error::NonFiniteState { .. }) => 2,
            CliError::SuiteFailure(_) => 3,
            _ => 1,
        }
    }
}
