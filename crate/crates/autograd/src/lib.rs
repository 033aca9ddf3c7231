//! Dense `f64` tensors with an eager reverse-mode tape, the convolution,
//! normalization and activation layers needed by small image networks, and
//! an Adam optimizer over named parameter stores.

pub mod conv;
mod error;
pub mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use error::{AutogradError, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::Tensor;
