//! Minimal reverse-mode differentiation: dense tensors, a define-by-run tape
//! and a finite-difference oracle.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_diff_check, relative_error};
pub use tape::{cosine_matrix_values, sigmoid, Gradients, NodeId, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;
