//! Minimal reverse-mode differentiation over dense tensors.
//!
//! Build a [`Graph`] over a [`ParamStore`], compose ops on [`Var`] handles,
//! then call [`Graph::backward`] on a scalar to get [`Gradients`]. Values are
//! stored as `f64`.

pub mod checkpoint;
mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, noam_lr, AdamState};
pub use params::{GradBuffer, Init, ParamId, ParamStore};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
