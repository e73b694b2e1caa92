use std::path::{Path, PathBuf};

use ilens_core::Error as CoreError;

/// Failures of a subcommand, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("schema violation at {path}: {message}")]
    Schema { path: String, message: String },
    #[error("missing file {}: {message}", path.display())]
    Missing { path: PathBuf, message: String },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{0}")]
    Other(String),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing {
                path: path.to_path_buf(),
                message: source.to_string(),
            }
        } else {
            CliError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Schema { .. } => 2,
            CliError::Missing { .. } => 3,
            CliError::NonFinite(_) => 4,
            CliError::Core(e) => match e {
                CoreError::Config(_) => 2,
                CoreError::NonFinite { .. } | CoreError::Diverged { .. } | CoreError::InversionDiverged { .. } => 4,
                _ => 1,
            },
            CliError::Io { .. } | CliError::Other(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "schema",
            3 => "missing",
            4 => "nonfinite",
            _ => "failure",
        }
    }

    /// One line: `error code=<n> kind=<kind> message=<json string>`.
    pub fn line(&self) -> String {
        format!(
            "error code={} kind={} message={}",
            self.exit_code(),
            self.kind(),
            serde_json::Value::String(self.to_string())
        )
    }
}
