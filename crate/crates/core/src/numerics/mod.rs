//! Dense matrices, a reverse-mode tape and a finite-difference oracle.

mod fd;
mod matrix;
mod tape;

pub use fd::{finite_diff_grad, relative_error};
pub use matrix::{l2_normalize_rows, matmul, softmax_rows, Matrix};
pub use tape::{CustomBackward, Gradients, Tape, Var};

/// Guard below which a row is treated as all-zero during normalization.
pub const NORM_EPS: f64 = 1e-12;
