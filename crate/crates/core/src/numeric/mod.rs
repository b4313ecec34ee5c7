//! Differentiable f64 tensor substrate.

pub mod container;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod rng;
mod tensor;

pub use graph::{
    broadcast_shape, softmax_rows, BatchStats, Graph, Mode, RunningStats, Var, BN_EPS, BN_MOMENTUM,
};
pub use rng::{mix, Rng};
pub use tensor::Tensor;
