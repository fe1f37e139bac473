//! Dense tensors and reverse-mode automatic differentiation.

mod contract;
mod dense;
pub mod gradcheck;
mod ops;
mod tape;

pub use dense::{broadcast_shape, Tensor};
pub use ops::{ConvGeometry, PAD};
pub use tape::{Tape, Var};

#[cfg(test)]
mod tests;
