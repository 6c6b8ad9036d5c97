use std::path::{Path, PathBuf};

/// Bad flags, unknown keys, invalid values, or a config that cannot run.
pub const EXIT_CONFIG: u8 = 2;
/// Missing, unreadable, unwritable or malformed files.
pub const EXIT_IO: u8 = 3;
/// Non-finite values or diverged training.
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("writing CSV failed: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Core(#[from] zofa::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> u8 {
        use zofa::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Csv(_) => EXIT_IO,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidArgument(_) | E::Shape(_) => EXIT_CONFIG,
                E::Io(_) | E::Format(_) => EXIT_IO,
                E::NonFinite(_) | E::Divergence { .. } => EXIT_NUMERICAL,
            },
        }
    }
}
