use thiserror::Error;

/// Errors produced by the attention kernels and their configuration.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions of an operand do not match what the operation requires.
    #[error("shape error: {0}")]
    Shape(String),

    /// A configuration value is out of range or inconsistent.
    #[error("config error: {0}")]
    Config(String),

    /// A text payload (matrix file, kernel file, config file) failed to parse.
    #[error("parse error: {0}")]
    Parse(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
