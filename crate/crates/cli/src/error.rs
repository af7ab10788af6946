use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },
    #[error("missing artifact {}; run the stage that produces it first", .0.display())]
    MissingArtifact(PathBuf),
    #[error("workdir is locked by another run ({}); remove it if that run is dead", .0.display())]
    Locked(PathBuf),
    #[error(transparent)]
    Core(#[from] ehr_rewrite::Error),
    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status: 2 for configuration errors, 3 for missing
    /// artifacts, 4 for a held lock, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Core(ehr_rewrite::Error::Config { .. }) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Locked(_) => 4,
            _ => 1,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
