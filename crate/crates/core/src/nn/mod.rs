//! A small tape-based reverse-mode differentiation engine and the layers
//! built on it.
//!
//! Values are stored as `f64`; see [`Precision`] for how 32-bit training is
//! emulated.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
pub mod ops;
mod param;
mod tensor;

pub use adam::{Adam, AdamConfig, DecayMode, StepReport};
pub use checkpoint::Checkpoint;
pub use graph::{Backward, Gradients, Graph, Var};
pub use param::{ParamId, ParamKind, ParamStore, ParameterTensor, Precision};
pub use tensor::Tensor;
