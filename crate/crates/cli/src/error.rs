use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dsa_core::Error),

    #[error(transparent)]
    Scenes(#[from] dsa_scenes::Error),

    #[error(transparent)]
    Detect(#[from] dsa_detect::Error),

    #[error(transparent)]
    Analysis(#[from] dsa_analysis::Error),

    #[error("{0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },

    #[error("{0}")]
    Failed(String),
}

pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Error {
    Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
