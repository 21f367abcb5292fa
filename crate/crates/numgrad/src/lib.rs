//! Minimal dense-tensor computation substrate with reverse-mode differentiation.
//!
//! The design is deliberately small and auditable:
//!
//! * [`Tensor`] — an immutable row-major array of `f64` with an explicit shape.
//! * [`Graph`] — an append-only list of primitive-op records. Builder methods
//!   (`matmul`, `add`, `softmax`, …) perform shape inference up front, so a
//!   graph that builds successfully can only fail at run time on bad bindings
//!   or non-finite arithmetic.
//! * [`Evaluation`] — the result of a forward pass; it caches every
//!   intermediate value, which is exactly the state reverse mode needs, so
//!   `backward` is a method on it (gradients before a forward pass are
//!   unrepresentable).
//! * [`grad_check`] — central-finite-difference verification of every
//!   trainable scalar, the oracle used by the test suite.
//!
//! There is no operator fusion, no in-place mutation, and no implicit
//! parallelism: identical bindings produce bit-identical outputs. Everything
//! is `f64`; at the intended problem sizes memory is irrelevant and gradient
//! fidelity is not.

#![forbid(unsafe_code)]

mod check;
mod error;
mod exec;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use error::Error;
pub use exec::{Bindings, Evaluation, Gradients};
pub use graph::{Graph, NodeId, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
