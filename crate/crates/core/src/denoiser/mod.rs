//! Noise-prediction models used by the sampler.

mod finite_diff;
mod gmm;

pub use finite_diff::finite_diff_vjp;
pub use gmm::{gmm_eps, gmm_vjp, GmmComponent, GmmDenoiser, GmmPrior};

use crate::error::Result;
use crate::image::ImageBuf;
use crate::scalar::Real;

/// A noise predictor `eps(x_t, t)`.
pub trait EpsModel<S: Real>: Send + Sync {
    fn eps(&self, x_t: &ImageBuf<S>, t: usize) -> Result<ImageBuf<S>>;
}

/// A noise predictor that can also pull a cotangent back through its Jacobian.
pub trait Denoiser<S: Real>: EpsModel<S> {
    /// Transpose-Jacobian product `(∂eps/∂x_t)^T · cotangent`.
    fn vjp(&self, x_t: &ImageBuf<S>, t: usize, cotangent: &ImageBuf<S>) -> Result<ImageBuf<S>>;
}

impl<S: Real, M: EpsModel<S> + ?Sized> EpsModel<S> for &M {
    fn eps(&self, x_t: &ImageBuf<S>, t: usize) -> Result<ImageBuf<S>> {
        (**self).eps(x_t, t)
    }
}

impl<S: Real, M: Denoiser<S> + ?Sized> Denoiser<S> for &M {
    fn vjp(&self, x_t: &ImageBuf<S>, t: usize, cotangent: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        (**self).vjp(x_t, t, cotangent)
    }
}
