//! Gradient-based meta-learning laboratory: a small reverse-mode autodiff
//! engine with double-backward, MAML-family training loops (second-order,
//! first-order, learned per-parameter rates), inner-loop gradient dropout,
//! synthetic task families, and a deterministic experiment harness.

pub mod autodiff;
pub mod dropgrad;
pub mod error;
pub mod harness;
pub mod metalearn;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
