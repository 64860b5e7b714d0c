use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid number format: {0}")]
    InvalidFormat(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("bad magic number in {what}: expected {expected:#x}, found {found:#x}")]
    Magic {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("unsupported model file version {0}")]
    Version(u32),

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<toml::ser::Error> for Error {
    fn from(e: toml::ser::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
