//! Error type shared across the library.

use std::fmt;

/// Errors produced by tensor primitives, samplers, and attack loops.
#[derive(Debug, Clone, PartialEq)]
pub enum CoreError {
    /// Operand shapes are invalid for an operation; names the op and shapes.
    ShapeMismatch { op: String, detail: String },
    /// An input left the documented domain of a primitive (log of a
    /// nonpositive value, nonfinite output, label out of range, ...).
    Domain { op: String, detail: String },
    /// Recording was attempted on a released tape.
    DeadTape,
    /// A node reference does not belong to the tape it was used with.
    NotOnTape { node: usize },
    /// Invalid configuration value.
    Config(String),
    /// A gradient entry required by an update rule is missing.
    MissingGradient { what: String },
}

impl fmt::Display for CoreError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CoreError::ShapeMismatch { op, detail } => {
                write!(f, "shape mismatch in {op}: {detail}")
            }
            CoreError::Domain { op, detail } => write!(f, "domain error in {op}: {detail}"),
            CoreError::DeadTape => write!(f, "operation recorded on a released tape"),
            CoreError::NotOnTape { node } => write!(f, "node {node} does not belong to this tape"),
            CoreError::Config(msg) => write!(f, "invalid configuration: {msg}"),
            CoreError::MissingGradient { what } => write!(f, "missing gradient entry for {what}"),
        }
    }
}

impl std::error::Error for CoreError {}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn shape(op: &str, detail: impl Into<String>) -> Self {
        CoreError::ShapeMismatch {
            op: op.to_string(),
            detail: detail.into(),
        }
    }

    pub fn domain(op: &str, detail: impl Into<String>) -> Self {
        CoreError::Domain {
            op: op.to_string(),
            detail: detail.into(),
        }
    }
}
