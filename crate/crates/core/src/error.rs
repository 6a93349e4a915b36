use std::io;

/// Errors raised anywhere in the lab: tensor math, model, data, training and evaluation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("tape error: {0}")]
    Tape(String),

    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("sequence of length {len} exceeds context window {ctx}")]
    Length { len: usize, ctx: usize },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("state error: {0}")]
    State(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("numerical abort at epoch {epoch}, step {step} ({task}): {detail}")]
    NumericalAbort {
        epoch: usize,
        step: usize,
        task: String,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by NaN/Inf during training or evaluation.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::NonFinite { .. } | Error::NumericalAbort { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
