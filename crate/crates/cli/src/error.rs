use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Data(String),

    #[error(transparent)]
    Core(#[from] spanet::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    /// 2 config error, 3 data error, 4 numeric divergence.
    pub fn exit_code(&self) -> i32 {
        use spanet::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Core(e) => match e {
                E::Config(_) | E::Shape(_) | E::InvalidArgument(_) => 2,
                E::Divergence(_) => 4,
                E::Data { .. } | E::Checkpoint(_) | E::Io { .. } | E::Image { .. } => 3,
            },
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;
