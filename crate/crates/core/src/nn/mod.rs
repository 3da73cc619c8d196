//! Minimal CPU tensor engine used by the network.

pub mod conv;
pub mod gemm;
pub mod layers;
pub mod tensor;

pub use conv::ConvSpec;
pub use tensor::{Shape, Tensor};
