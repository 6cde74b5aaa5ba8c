//! Concrete noise predictors.

pub mod checkpoint;
pub mod dataset;
pub mod gaussian;
pub mod toy;
pub mod train;

pub use gaussian::{GaussianDenoiser, GaussianVideoModel};
