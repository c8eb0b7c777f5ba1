//! Dense arrays and a tape-based reverse-mode differentiation engine.
//!
//! Everything the network needs lives here: convolution (im2col + GEMM),
//! pooling, upsampling, activations, attention building blocks, corner
//! pooling and the fused loss primitives. Arrays are generic over [`Real`]
//! so the same graph runs in `f32` for training and `f64` for gradient
//! checks.

mod array;
mod direct;
pub mod checkpoint;
mod graph;
pub mod gradcheck;
mod real;

pub use array::NdArray;
pub use graph::{Graph, Var};
pub use real::Real;
