use thiserror::Error;

/// Errors shared across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("dimension mismatch: expected length {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("pair index {index} out of range for {n} samples")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("unknown message kind byte 0x{0:02x}")]
    UnknownKind(u8),
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("connection closed")]
    Disconnected,
    #[error("model file error: {0}")]
    Model(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
