//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Graph`] is rebuilt every training step: leaves are registered with
//! [`Graph::param`] (trainable) or [`Graph::constant`], operations append
//! nodes in topological order, and [`Graph::backward`] walks the tape once
//! in reverse. [`Graph::stop_gradient`] passes values through while cutting
//! every gradient path behind it.

mod error;
mod graph;
mod optim;
mod tensor;

pub use error::{AutodiffError, Result};
pub use graph::{Graph, Var};
pub use optim::{cosine_lr, OptimizerKind, OptimizerState};
pub use tensor::{affine_into, Tensor};
