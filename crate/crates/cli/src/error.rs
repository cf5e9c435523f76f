use std::path::PathBuf;

/// Failures of a CLI command, each mapped to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error(transparent)]
    Core(#[from] cocolora_core::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("gradient check failed:\n{0}")]
    GradCheck(String),

    #[error(transparent)]
    Usage(#[from] clap::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl CliError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use cocolora_core::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Usage(e) => e.exit_code(),
            CliError::Io { .. } => EXIT_DATA,
            CliError::GradCheck(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape { .. } => EXIT_CONFIG,
                E::Data { .. } | E::Dataset(_) | E::Io { .. } | E::Checkpoint(_) | E::MissingAudio { .. } => EXIT_DATA,
                E::NonFinite { .. } | E::NonFiniteLoss(_) | E::UndefinedMetric(_) | E::MissingNoise => EXIT_NUMERIC,
            },
        }
    }
}
