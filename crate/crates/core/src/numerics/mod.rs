//! Dense tensors, reverse-mode differentiation, Adam, and weight files.

pub mod gradcheck;
mod graph;
mod init;
mod optim;
mod params;
mod tensor;
pub mod weights;

pub use graph::{sigmoid, softmax_rows, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use init::{truncated_normal, INIT_STDDEV};
pub use optim::{Adam, OptimizerConfig};
pub use params::{ParamStore, Parameter};
pub use tensor::Tensor;

pub(crate) use graph::softplus;
