//! Dense reverse-mode automatic differentiation over `f64` arrays.
//!
//! Only the operations the segmentation model and its losses need are
//! provided. Broadcasting is limited to equal shapes and single-element
//! operands.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Graph, Var, NORM_EPS};
pub(crate) use graph::resize_taps;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
