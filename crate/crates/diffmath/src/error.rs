use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error at node {node} ({op}): {detail}")]
    Dimension {
        node: usize,
        op: &'static str,
        detail: String,
    },

    #[error("matrix data length {len} does not match shape {rows}x{cols}")]
    Shape { rows: usize, cols: usize, len: usize },

    #[error("tape state error: {0}")]
    State(String),

    #[error("contract error: {0}")]
    Contract(String),
}

pub type Result<T, E = DiffError> = std::result::Result<T, E>;
