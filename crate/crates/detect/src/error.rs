use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] dsa_core::Error),

    #[error(transparent)]
    Scenes(#[from] dsa_scenes::Error),

    #[error("config: {0}")]
    Config(String),

    #[error("non-finite loss {loss} at epoch {epoch}, step {step} (image {image})")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        image: usize,
        loss: f64,
    },

    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
