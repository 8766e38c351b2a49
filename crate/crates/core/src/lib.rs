//! Quantized diagonal state-space (S4D) classifiers, fixed-range
//! quantization-aware training, and their deployment on simulated 64×64
//! memristive crossbar arrays.

pub mod audio;
pub mod crossbar;
pub mod error;
pub mod harness;
pub mod quant;
pub mod rng;
pub mod ssm;
pub mod train;

pub use error::{Error, ErrorClass, Result};
