//! Dense `f64` tensors with reverse-mode differentiation and an Adam
//! optimizer: enough to pretrain the toy backbone and to train projectors
//! through it.

mod gradcheck;
mod graph;
pub mod kernels;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled, MAX_CHECKED_COORDS};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, adam_update, clip_grad_norm, cosine_lr, AdamConfig, AdamState};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
