//! Dense tensors, reverse-mode differentiation, layers, Adam, and seeded randomness.

pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tensor;

pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamId, ParamStore};
pub use rng::RngState;
pub use tensor::Tensor;
