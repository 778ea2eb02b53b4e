use std::fmt;

use thiserror::Error;

/// Shape of a tensor operand as reported in errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeDesc(pub Vec<usize>);

impl fmt::Display for ShapeDesc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid Q format Q{int_bits}.{frac_bits}: {reason}")]
    InvalidFormat {
        int_bits: u32,
        frac_bits: u32,
        reason: &'static str,
    },

    #[error("invalid tensor data: non-finite value {value} at index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("code {code} outside the range [{min}, {max}] of the format (corrupted data?)")]
    CodeOutOfRange { code: i64, min: i64, max: i64 },

    #[error("invalid dynamic scale set: {0}")]
    InvalidScaleSet(String),

    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch {
        op: &'static str,
        left: ShapeDesc,
        right: ShapeDesc,
    },

    #[error("table construction failed: max error {max_error:.6} exceeds budget {budget}")]
    TableBudget { max_error: f64, budget: f64 },

    #[error("invalid table parameters: {0}")]
    TableParams(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invariant violated: {field}: {msg}")]
    Invariant { field: &'static str, msg: String },

    #[error("accumulator overflow in {0}")]
    Overflow(&'static str),

    #[error("invalid policy: {0}")]
    Policy(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("diverged at step {step}: {msg}")]
    Divergence { step: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: ShapeDesc(left.to_vec()),
            right: ShapeDesc(right.to_vec()),
        }
    }
}
