//! Dense tensors with reverse-mode differentiation.

mod gradcheck;
mod graph;
mod params;
mod suite;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{softmax_rows, Graph, NodeId};
pub(crate) use graph::spectral_scale;
pub use params::{Group, Param, ParamId, ParamStore};
pub use suite::{op_losses, op_suite, OpLoss, SuiteResult};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
