use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box [{x1}, {y1}, {x2}, {y2}]: zero or negative area")]
    DegenerateBox { x1: f64, y1: f64, x2: f64, y2: f64 },

    #[error("invalid scene config: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },

    #[error(transparent)]
    Core(#[from] dsa_core::Error),
}

impl Error {
    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
