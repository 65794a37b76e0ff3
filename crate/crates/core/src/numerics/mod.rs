//! Dense tensors, reverse-mode differentiation and the seeded generator
//! everything else is built on.

mod gradcheck;
mod graph;
mod rng;
mod scalar;
mod tensor;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::Tensor;
