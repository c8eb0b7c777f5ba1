pub mod baseline;
pub mod chargrid;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod funsd;
pub mod loss;
pub mod model;
pub mod net;
pub mod render;
pub mod synth;
pub mod targets;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
