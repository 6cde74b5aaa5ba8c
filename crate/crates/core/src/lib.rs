//! Training-free trajectory control for diffusion samplers.

pub mod attention;
pub mod benchmark;
pub mod config;
pub mod denoisers;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod export;
pub mod masknorm;
pub mod masks;
pub mod sampler;
pub mod schedule;
pub mod temporal_prior;

pub use error::{Error, Result};

/// `frames x channels x height x width` latent.
pub type LatentVideo = ndarray::Array4<f64>;
