use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {actual})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{op}: unsupported convolution {kernel_h}x{kernel_w} stride {stride} padding {padding}")]
    UnsupportedConv {
        op: &'static str,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, dim: &'static str, expected: usize, actual: usize) -> Self {
        Error::ShapeMismatch {
            op,
            dim,
            expected,
            actual,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
