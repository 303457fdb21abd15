//! Minimal reverse-mode differentiation engine.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{analytic_gradient, compare_gradients, finite_difference_check, GradReport};
pub use graph::{concat, Graph, Var, LOG_EPS, NORM_EPS};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
