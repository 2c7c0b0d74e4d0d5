//! Single-token image autoencoding with flow-matching decoders and a
//! latent generator.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod flowmatch;
pub mod graph;
pub mod kernels;
pub mod latent_generator;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
