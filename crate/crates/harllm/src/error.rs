//! Crate-wide error type and result alias.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration value.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data, with file and line where known.
    #[error("parse error at {file}:{line}: {message}")]
    Parse {
        file: String,
        line: u64,
        message: String,
    },

    /// Class or element index outside the valid range.
    #[error("index error: {0}")]
    Index(String),

    /// Non-finite value where a finite one is required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Missing or inconsistent tensor in a checkpoint, naming the tensor.
    #[error("checkpoint error: tensor `{tensor}`: {message}")]
    Checkpoint { tensor: String, message: String },

    /// Metric requested on an empty or invalid input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Evaluation input outside the model's label vocabulary.
    #[error("evaluation error: {0}")]
    Eval(String),

    /// Token sequence longer than the backbone's position table.
    #[error("sequence length {n} exceeds max positions {max}")]
    SequenceLength { n: usize, max: usize },

    /// A self-check (audit, acceptance) measured a value outside tolerance.
    #[error("check failed: {name}: measured {measured}, tolerance {tolerance}")]
    CheckFailed {
        name: String,
        measured: f64,
        tolerance: f64,
    },

    #[error("training aborted at step {step}: non-finite gradient in `{parameter}`")]
    NonFiniteGradient { step: u64, parameter: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op: op.to_string(),
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn parse(file: impl Into<String>, line: u64, msg: impl Into<String>) -> Self {
        Error::Parse {
            file: file.into(),
            line,
            message: msg.into(),
        }
    }

    pub fn checkpoint(tensor: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Checkpoint {
            tensor: tensor.into(),
            message: msg.into(),
        }
    }

    /// Process exit status for the CLI: 2 for usage/config/input problems,
    /// 1 for failed checks and runtime errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::Csv(_) => 2,
            _ => 1,
        }
    }
}
