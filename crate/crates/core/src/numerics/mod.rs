//! Dense tensors and reverse-mode differentiation.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, PatchGeometry, Unary, Var, RMS_EPS};
pub use optim::{clip_grad_norm, AdamW, GradMap, Parameters, Sgd};
pub use tensor::{Precision, Tensor};

pub(crate) use graph::softplus;
