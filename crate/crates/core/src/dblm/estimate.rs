use super::spectrum::{radial_log_power, radial_transfer_power, RadialSpectrum};
use super::wiener_restore;
use crate::error::Result;
use crate::gaussian::{convolve, GaussianKernel};
use crate::grid::StdGrid;
use crate::image::ImageBuf;
use crate::scalar::{lit, Real};

/// Result of a blur-level estimate.
#[derive(Clone, Debug)]
pub struct StdEstimate<S> {
    /// Estimated std, snapped to the grid.
    pub std_hat: f64,
    /// `k^{std_hat} ⊗ restore(y)` with the estimator's own restorer.
    pub intermediate: ImageBuf<S>,
    /// Mean squared log-spectrum misfit at the optimum.
    pub misfit: f64,
}

/// Widths (pixels) of the Gaussian-shaped noise floor `N·exp(-4π²ρ²f²)` tried
/// by the fit; zero is a flat floor. Shaped floors cover noise that was added
/// before an interpolating up-sampler.
const FLOOR_WIDTHS: [f64; 6] = [0.0, 0.5, 0.75, 1.0, 1.25, 1.5];

/// Bins more than this many nats below the strongest bin are treated as
/// censored: they only penalize a model that predicts power above the cut.
const DYNAMIC_RANGE: f64 = 23.0;

/// Matches an input's radial spectrum against
/// `a · reference · |T_σ|² + b · floor_ρ` with `a, b ≥ 0`, where `|T_σ|²` is the
/// radially averaged power response of the discrete kernel, searching σ over
/// the grid and ρ over a few floor shapes.
#[derive(Clone, Debug)]
pub struct SpectralEstimator {
    reference: RadialSpectrum,
    grid: StdGrid,
    noise_power: f64,
}

impl SpectralEstimator {
    pub fn new(reference: RadialSpectrum, grid: StdGrid, noise_power: f64) -> Self {
        Self { reference, grid, noise_power }
    }

    pub fn reference(&self) -> &RadialSpectrum {
        &self.reference
    }

    pub fn grid(&self) -> &StdGrid {
        &self.grid
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    /// Per-grid-point misfit curve; exposed for diagnostics.
    pub fn misfit_curve<S: Real>(&self, y: &ImageBuf<S>) -> Result<Vec<f64>> {
        let spec = radial_log_power(y)?;
        self.reference.check_compatible(&spec)?;
        let (h, w, _) = y.shape();
        let ly = spec.log_power();
        let freqs = spec.frequencies();
        let cut = ly.iter().copied().fold(f64::NEG_INFINITY, f64::max) - DYNAMIC_RANGE;
        let py: Vec<f64> = ly.iter().map(|l| l.exp()).collect();
        let pref: Vec<f64> = self.reference.log_power().iter().map(|l| l.exp()).collect();
        let four_pi2 = 4.0 * std::f64::consts::PI * std::f64::consts::PI;
        let floors: Vec<Vec<f64>> = FLOOR_WIDTHS
            .iter()
            .map(|&rho| freqs.iter().map(|&f| (-four_pi2 * rho * rho * f * f).exp()).collect())
            .collect();

        // most radial bins sit at high frequency, where noise and resampling
        // dominate; 1/√f gives the blur-shaped low band a fair say
        let weights: Vec<f64> = freqs.iter().map(|f| 1.0 / f.sqrt()).collect();
        let mut curve = Vec::with_capacity(self.grid.len());
        for &sigma in self.grid.values() {
            let kernel = GaussianKernel::<f64>::new(sigma)?;
            let response = radial_transfer_power(h, w, |f| kernel.transfer(f));
            let signal: Vec<f64> = pref.iter().zip(&response).map(|(p, t)| p * t).collect();
            let best = floors
                .iter()
                .map(|floor| fit_two(&signal, floor, &py, ly, cut, &weights))
                .fold(f64::INFINITY, f64::min);
            curve.push(best);
        }
        Ok(curve)
    }

    pub fn estimate<S: Real>(&self, y: &ImageBuf<S>) -> Result<StdEstimate<S>> {
        let curve = self.misfit_curve(y)?;
        let mut best = 0;
        for (i, &m) in curve.iter().enumerate() {
            if m < curve[best] - 1e-12 {
                best = i;
            }
        }
        let std_hat = self.grid.values()[best];
        let restored = wiener_restore(y, std_hat, self.noise_power)?;
        let intermediate = convolve(&restored, &GaussianKernel::new(lit::<S>(std_hat))?);
        Ok(StdEstimate { std_hat, intermediate, misfit: curve[best] })
    }
}

/// Log-domain misfit of the best `a·signal + b·floor` with `a, b ≥ 0`.
///
/// The coefficients come from relative-error least squares in the power
/// domain over uncensored bins; the returned misfit is the weighted mean
/// squared log error, where censored bins only count the model's excess over
/// `cut`.
fn fit_two(signal: &[f64], floor: &[f64], py: &[f64], ly: &[f64], cut: f64, weights: &[f64]) -> f64 {
    let (mut saa, mut sab, mut sbb, mut sa, mut sb) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..py.len() {
        if ly[i] < cut {
            continue;
        }
        let (a, b) = (signal[i] / py[i], floor[i] / py[i]);
        saa += a * a;
        sab += a * b;
        sbb += b * b;
        sa += a;
        sb += b;
    }
    let cost = |ca: f64, cb: f64| -> f64 {
        let mut total = 0.0;
        for i in 0..py.len() {
            let pred = (ca * signal[i] + cb * floor[i]).max(1e-300).ln();
            let r = if ly[i] >= cut { ly[i] - pred } else { (pred - cut).max(0.0) };
            total += weights[i] * r * r;
        }
        total / weights.iter().sum::<f64>()
    };
    let mut candidates = Vec::with_capacity(3);
    let det = saa * sbb - sab * sab;
    if det.abs() > 1e-12 * saa * sbb {
        let ca = (sa * sbb - sb * sab) / det;
        let cb = (sb * saa - sa * sab) / det;
        if ca >= 0.0 && cb >= 0.0 {
            candidates.push((ca, cb));
        }
    }
    if saa > 0.0 {
        candidates.push((sa / saa, 0.0));
    }
    if sbb > 0.0 {
        candidates.push((0.0, sb / sbb));
    }
    candidates.into_iter().map(|(ca, cb)| cost(ca, cb)).fold(f64::INFINITY, f64::min)
}

/// Spectral std estimate with the default Wiener regularization.
pub fn estimate_std<S: Real>(
    y: &ImageBuf<S>,
    reference: &RadialSpectrum,
    grid: &StdGrid,
) -> Result<StdEstimate<S>> {
    SpectralEstimator::new(reference.clone(), grid.clone(), 1e-3).estimate(y)
}
