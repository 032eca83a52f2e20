use std::path::PathBuf;

use tclab_core::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("cannot load checkpoint {}: {source}", path.display())]
    Checkpoint { path: PathBuf, source: CoreError },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    /// 2 configuration, 3 training divergence, 4 I/O or checkpoint; 1 for
    /// internal invariant failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Checkpoint { .. } | CliError::Io { .. } => 4,
            CliError::Core(e) => match e {
                CoreError::Diverged { .. } | CoreError::NonFiniteGradient(_) | CoreError::GeneratorModified => 3,
                CoreError::Io(_) | CoreError::Format(_) => 4,
                CoreError::Invariant(_) => 1,
                _ => 2,
            },
        }
    }
}

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}
