pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod flops;
pub mod fourier;
pub mod image_io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod rain;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
