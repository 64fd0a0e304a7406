use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dsa_core::Error),

    #[error("{0}")]
    Invalid(String),

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

pub(crate) fn io(path: &std::path::Path, e: impl ToString) -> Error {
    Error::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

pub type Result<T> = std::result::Result<T, Error>;
