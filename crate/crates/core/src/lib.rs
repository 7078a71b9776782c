//! Compression-oriented diffusion: an image codec whose decoder is a
//! conditional rectified-flow model driven by a vector-quantized token grid.

pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod conditioner;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod flow;
pub mod latent;
pub mod model;
pub mod network;
pub mod nn;
pub mod patch;
pub mod rate;
pub mod training;

pub use error::{Error, Result};
