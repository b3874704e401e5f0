//! Blur-level mapping: turns an arbitrarily degraded input into a surrogate that
//! is exactly Gaussian-blurred relative to a restorer's output.

mod estimate;
mod sde;

mod spectrum;
mod std_star;

pub use estimate::{estimate_std, SpectralEstimator, StdEstimate};
pub use sde::{train_sde, SdeConfig, SdeOutcome, SdeRegressor};

pub use spectrum::{radial_log_power, RadialSpectrum};
pub use std_star::{find_std_star, StdStar};

use rustfft::num_complex::Complex;

use crate::error::{Error, Result};
use crate::gaussian::{convolve, GaussianKernel};
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};
use crate::spectral::{bin_frequency, mirror_extend, Fft2};

/// A restoration model mapping a degraded image to a cleaner estimate.
pub trait Restorer<S: Real>: Send + Sync {
    fn restore(&self, y: &ImageBuf<S>) -> Result<ImageBuf<S>>;
}

impl<S: Real, R: Restorer<S> + ?Sized> Restorer<S> for &R {
    fn restore(&self, y: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        (**self).restore(y)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRestorer;

impl<S: Real> Restorer<S> for IdentityRestorer {
    fn restore(&self, y: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        Ok(y.clone())
    }
}

/// Wiener deconvolution against a fixed Gaussian kernel.
#[derive(Clone, Copy, Debug)]
pub struct WienerRestorer {
    pub assumed_std: f64,
    pub noise_power: f64,
}

impl WienerRestorer {
    pub fn new(assumed_std: f64, noise_power: f64) -> Result<Self> {
        if !(noise_power >= 0.0) {
            return Err(Error::param("noise_power", format!("{noise_power} is negative")));
        }
        if !(assumed_std >= 0.0) {
            return Err(Error::param("std", format!("{assumed_std} is negative")));
        }
        Ok(Self { assumed_std, noise_power })
    }
}

impl<S: Real> Restorer<S> for WienerRestorer {
    fn restore(&self, y: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        wiener_restore(y, self.assumed_std, self.noise_power)
    }
}

/// Frequency-domain Wiener deconvolution `Y·H / (H² + noise_power)` on the
/// mirrored image, where `H` is the transfer function of the discrete kernel.
///
/// The per-channel mean is removed first and restored afterwards, so an
/// infinite `noise_power` returns the flat mean image. A delta kernel returns `y`.
pub fn wiener_restore<S: Real>(y: &ImageBuf<S>, assumed_std: f64, noise_power: f64) -> Result<ImageBuf<S>> {
    if !(noise_power >= 0.0) {
        return Err(Error::param("noise_power", format!("{noise_power} is negative")));
    }
    let kernel = GaussianKernel::<f64>::new(assumed_std)?;
    if kernel.is_delta() {
        return Ok(y.clone());
    }
    let (h, w, c) = y.shape();
    let (mh, mw) = (2 * h, 2 * w);
    let ty: Vec<f64> = (0..mh).map(|k| kernel.transfer(bin_frequency(k, mh))).collect();
    let tx: Vec<f64> = (0..mw).map(|k| kernel.transfer(bin_frequency(k, mw))).collect();
    let fft = Fft2::new(mh, mw);
    let mut out = ImageBuf::zeros_like(y);
    for ch in 0..c {
        let plane: Vec<f64> = y.channel(ch).as_slice().iter().map(|&v| to_f64(v)).collect();
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let centred: Vec<f64> = plane.iter().map(|v| v - mean).collect();
        let mut spec = mirror_extend(&centred, h, w);
        fft.forward(&mut spec);
        for (ky, &hy) in ty.iter().enumerate() {
            for (kx, &hx) in tx.iter().enumerate() {
                let hk = hy * hx;
                let gain = if noise_power.is_infinite() { 0.0 } else { hk / (hk * hk + noise_power) };
                let gain = if gain.is_finite() { gain } else { 0.0 };
                spec[ky * mw + kx] *= Complex::new(gain, 0.0);
            }
        }
        fft.inverse(&mut spec);
        for yy in 0..h {
            for xx in 0..w {
                out.set(yy, xx, ch, lit(spec[yy * mw + xx].re + mean));
            }
        }
    }
    Ok(out)
}

/// The guidance measurement `k^{std_hat} ⊗ restorer(y)`.
pub fn dblm_map<S: Real, R: Restorer<S> + ?Sized>(y: &ImageBuf<S>, restorer: &R, std_hat: f64) -> Result<ImageBuf<S>> {
    let restored = restorer.restore(y)?;
    y.check_shape(&restored)?;
    Ok(convolve(&restored, &GaussianKernel::new(lit::<S>(std_hat))?))
}
