//! Minimal reverse-mode differentiation over dense 2-D matrices, plus the
//! finite-difference gradient checker that validates it.

mod check;
mod graph;
mod matrix;

pub use check::{
    check_builder, finite_diff_check, run_gradcheck_suite, run_gradcheck_suite_perturbed,
    CheckedOp, OpCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
pub use graph::{sigmoid, softplus, Graph, NodeId};
pub use matrix::Matrix;
