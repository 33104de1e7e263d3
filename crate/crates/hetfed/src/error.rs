use std::path::{Path, PathBuf};

/// Every failure a command can report, split by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("no CSV files found in {}", .0.display())]
    EmptyInput(PathBuf),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// 1 for anything wrong with the request, 2 for filesystem failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::EmptyInput(_) => 1,
            CliError::Io { .. } => 2,
        }
    }

    pub fn validation(msg: impl std::fmt::Display) -> Self {
        CliError::Validation(msg.to_string())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn csv(path: &Path, err: csv::Error) -> Self {
        match err.into_kind() {
            csv::ErrorKind::Io(source) => CliError::io(path, source),
            other => CliError::Validation(format!("{}: {:?}", path.display(), other)),
        }
    }
}

impl From<hetfed_core::fedsim::FedError> for CliError {
    fn from(e: hetfed_core::fedsim::FedError) -> Self {
        CliError::validation(e)
    }
}

impl From<hetfed_core::mlp::MlpError> for CliError {
    fn from(e: hetfed_core::mlp::MlpError) -> Self {
        CliError::validation(e)
    }
}

impl From<hetfed_core::synthdata::DataError> for CliError {
    fn from(e: hetfed_core::synthdata::DataError) -> Self {
        CliError::validation(e)
    }
}
