//! Blind image restoration by guided diffusion sampling.

pub mod ablation;
pub mod config;
pub mod dblm;
pub mod dgsa;
pub mod degrade;
pub mod denoiser;
pub mod dsst;
pub mod error;
pub mod gaussian;
pub mod grid;
pub mod guidance;
pub mod image;
pub mod io;
pub mod metrics;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod schedule;
mod spectral;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Image = image::ImageBuf<f64>;
pub type Schedule = schedule::DiffusionSchedule<f64>;
pub type Kernel = gaussian::GaussianKernel<f64>;
