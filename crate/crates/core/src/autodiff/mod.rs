//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;
pub mod weights;

pub use adam::AdamState;
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Activation, BatchStats, Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::magnify_row;

#[cfg(test)]
mod tests;
