//! Minimal dense tensor engine with reverse-mode differentiation.
//!
//! Only one form of broadcasting exists: a right-hand operand may match the
//! trailing axes of the left one and is repeated over the leading axes
//! (bias vectors, positional tables, attention masks).

mod batchnorm;
pub mod gradcheck;
mod tape;
mod tensor;

pub use batchnorm::{BatchNormState, BN_EPS, BN_MOMENTUM};
pub use tape::{AutogradError, Gradients, OpStats, Tape, Var};
pub use tensor::{gemm, Scalar, Tensor};

#[cfg(test)]
mod tests;
