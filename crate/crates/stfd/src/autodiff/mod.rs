//! Minimal reverse-mode differentiation engine.
//!
//! The graph is define-by-run: every op allocates a fresh output node
//! holding a closure that maps the output gradient to its parents'
//! gradients. `Tensor::backward` walks the DAG in reverse topological
//! order and accumulates gradients into every `requires_grad` leaf.
//!
//! All code is generic over [`Scalar`] so production runs in 32-bit
//! while gradient verification runs the same code paths in 64-bit.

mod ops;
mod optim;
mod scalar;
mod tensor;

pub mod gradcheck;

pub use ops::*;
pub use optim::{kaiming_uniform, Adam, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
