pub mod capsule;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod io;
pub mod routing;
pub mod tensor;

pub use error::{Error, Result, TensorError};
