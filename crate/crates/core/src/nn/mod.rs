//! Minimal reverse-mode autodiff and the residual-MLP noise predictor.

pub mod checkpoint;
pub mod graph;
pub mod net;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use graph::{Grads, Graph, Var};
pub use net::{Dense, EpsilonNet, Gradients, NetArch, NetPreset, ParamVars, ResidualBlock};
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::Tensor;
