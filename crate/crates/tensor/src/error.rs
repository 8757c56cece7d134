use thiserror::Error;

fn fmt_shape(shape: &(usize, usize)) -> String {
    format!("{}x{}", shape.0, shape.1)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {} and {}", fmt_shape(.lhs), fmt_shape(.rhs))]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: empty tensor where a nonempty one is required")]
    Empty { op: &'static str },
    #[error("data length {len} does not match shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("{op}: index {index} out of range for {bound} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("tensor does not belong to this tape")]
    ForeignTensor,
    #[error("backward requires a 1x1 loss, got {}", fmt_shape(.0))]
    NonScalarLoss((usize, usize)),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("objective evaluated to a non-finite value at parameter {param}, entry {entry}")]
    NonFiniteObjective { param: usize, entry: usize },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Self::ShapeMismatch { op, lhs, rhs }
    }
}
