//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod graph;
mod linalg;
mod loss;
mod tape;
mod tensor;

pub use graph::{
    grad_check, relative_error, ComputationSpec, Coordinates, Graph, LayerSpec, Nonlinearity,
    GRAD_CHECK_FLOOR,
};
pub use loss::{distillation_kl, softmax_rows, weighted_cross_entropy};
pub use tape::{Tape, Var, PROB_FLOOR};
pub use tensor::{GradientVector, LayoutEntry, ParameterVector, Tensor};


#[cfg(test)]
mod tests;
