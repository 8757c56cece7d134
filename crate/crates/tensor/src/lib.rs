//! Minimal dense 2-D tensor engine with reverse-mode differentiation.
//!
//! Values are row-major `f64` matrices. Row vectors (`1 × n`) are the
//! convention for single embeddings. Broadcasting is limited to adding a
//! `1 × cols` row to every row of a matrix.

mod error;
pub mod gradcheck;
mod matrix;
mod tape;

pub use error::TensorError;
pub use gradcheck::{finite_difference_check, relative_error, FdReport};
pub use matrix::Matrix;
pub use tape::{cosine, log_sum_exp, softmax_rows, Tape, Var};
