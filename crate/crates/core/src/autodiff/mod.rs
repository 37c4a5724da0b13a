//! Dense `f64` tensors with a define-by-run reverse-mode tape.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_with, BoundParams, Coordinates};
pub use graph::{AttentionLayout, GradientMap, Graph, Var};
pub(crate) use graph::gemm;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
