//! Reverse-mode automatic differentiation over dense `f64` arrays.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod nn;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use adam::Adam;
pub use nn::{Activation, Mlp};
pub use params::{Bound, ParamSet};
pub use scalar::{Real, Var};
pub use tape::{CustomOp, Gradients, NodeId, Tape};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
