//! Dense `f64` tensors and tape-based reverse-mode differentiation.

pub mod kernels;
mod tape;
mod value;

#[cfg(test)]
pub(crate) mod gradcheck;

pub use tape::{sigmoid, softplus, Tape, Unary, Var};
pub use value::Tensor;

#[cfg(test)]
mod tests;
