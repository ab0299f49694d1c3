use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("non-finite value in layer {layer}")]
    Numeric { layer: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("inconsistent inputs: {0}")]
    Consistency(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid lattice structure: {0}")]
    Structural(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("parse error on line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
