//! Dual-attention GAN for semantic image synthesis, self-contained on CPU.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod netpbm;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
