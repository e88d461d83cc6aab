//! Tensor storage and reverse-mode differentiation.

pub mod gradcheck;
pub mod tape;
pub mod tensor;

pub use tape::{NodeId, Tape};
pub use tensor::{Scalar, Tensor};
