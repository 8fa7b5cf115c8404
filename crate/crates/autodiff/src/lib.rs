//! Minimal reverse-mode automatic differentiation over dense `f64` matrices,
//! with the kernels, layers and optimizer needed to train small transformer
//! and MLP models on a CPU.

pub mod check;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod tensor;

pub use check::{gradcheck, GradCheck};
pub use error::{AutodiffError, Result};
pub use graph::{CustomOp, Graph, NodeId};
pub use nn::{Activation, Binding, Linear, Mlp, ParamId, ParamStore};
pub use optim::{AdamW, AdamWConfig};
pub use tensor::Tensor;
