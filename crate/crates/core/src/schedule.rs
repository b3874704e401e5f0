//! DDPM coefficient tables and the primitive forward/reverse steps.
//!
//! Timesteps are indexed `0..T`. The reverse chain runs `t = t_start ..= 1`;
//! the output of the step taken at `t = 1` is the restored image.

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::scalar::{lit, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule<S> {
    beta: Vec<S>,
    alpha: Vec<S>,
    alpha_bar: Vec<S>,
    sigma: Vec<S>,
}

/// Linear beta schedule from `beta_start` to `beta_end` inclusive.
pub fn make_schedule<S: Real>(
    num_steps: usize,
    beta_start: f64,
    beta_end: f64,
) -> Result<DiffusionSchedule<S>> {
    if num_steps < 2 {
        return Err(Error::param("T", format!("need at least 2 timesteps, got {num_steps}")));
    }
    if !(beta_start > 0.0 && beta_start < 1.0) {
        return Err(Error::param("beta_start", format!("{beta_start} not in (0, 1)")));
    }
    if !(beta_end >= beta_start && beta_end < 1.0) {
        return Err(Error::param("beta_end", format!("{beta_end} not in [beta_start, 1)")));
    }
    let last = (num_steps - 1) as f64;
    let beta: Vec<S> = (0..num_steps)
        .map(|i| lit(beta_start + (beta_end - beta_start) * i as f64 / last))
        .collect();
    Ok(DiffusionSchedule::from_betas(beta))
}

impl<S: Real> DiffusionSchedule<S> {
    /// Default schedule: T = 1000, beta in [1e-4, 0.02].
    pub fn standard() -> Self {
        make_schedule(1000, 1e-4, 0.02).expect("standard schedule parameters are valid")
    }

    fn from_betas(beta: Vec<S>) -> Self {
        let alpha: Vec<S> = beta.iter().map(|&b| S::one() - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = S::one();
        for &a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        let sigma = beta.iter().map(|b| b.sqrt()).collect();
        Self { beta, alpha, alpha_bar, sigma }
    }

    #[inline]
    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    #[inline]
    pub fn beta(&self, t: usize) -> S {
        self.beta[t]
    }

    #[inline]
    pub fn alpha(&self, t: usize) -> S {
        self.alpha[t]
    }

    #[inline]
    pub fn alpha_bar(&self, t: usize) -> S {
        self.alpha_bar[t]
    }

    #[inline]
    pub fn sigma(&self, t: usize) -> S {
        self.sigma[t]
    }

    pub fn betas(&self) -> &[S] {
        &self.beta
    }

    pub fn alpha_bars(&self) -> &[S] {
        &self.alpha_bar
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t < self.num_steps() {
            Ok(())
        } else {
            Err(Error::param("t", format!("timestep {t} outside [0, {})", self.num_steps())))
        }
    }

    /// Forward jump `sqrt(abar) x0 + sqrt(1 - abar) noise`.
    pub fn q_sample(&self, x0: &ImageBuf<S>, t: usize, noise: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        x0.zip_map(noise, |x, n| a * x + b * n)
    }

    /// Clean-image estimate implied by a noise prediction.
    pub fn predict_x0(&self, x_t: &ImageBuf<S>, t: usize, eps: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        self.check_timestep(t)?;
        let ab = self.alpha_bar[t];
        let (a, b) = (ab.sqrt(), (S::one() - ab).sqrt());
        x_t.zip_map(eps, |x, e| (x - b * e) / a)
    }

    /// Unguided ancestral step producing `x_{t-1}`.
    ///
    /// At `t = 1` the noise term is dropped.
    pub fn reverse_step_mean(
        &self,
        x_t: &ImageBuf<S>,
        t: usize,
        eps: &ImageBuf<S>,
        noise: &ImageBuf<S>,
    ) -> Result<ImageBuf<S>> {
        if t == 0 {
            return Err(Error::param("t", "no reverse step below t = 0"));
        }
        self.check_timestep(t)?;
        x_t.check_shape(eps)?;
        x_t.check_shape(noise)?;
        let inv_sqrt_alpha = S::one() / self.alpha[t].sqrt();
        let coef = self.beta[t] / (S::one() - self.alpha_bar[t]).sqrt();
        let sigma = if t == 1 { S::zero() } else { self.sigma[t] };
        let mut out = ImageBuf::zeros_like(x_t);
        for (((o, &x), &e), &n) in out
            .as_mut_slice()
            .iter_mut()
            .zip(x_t.as_slice())
            .zip(eps.as_slice())
            .zip(noise.as_slice())
        {
            *o = inv_sqrt_alpha * (x - coef * e) + sigma * n;
        }
        Ok(out)
    }

    /// Signal-to-noise ratio `abar / (1 - abar)` at `t`.
    pub fn snr(&self, t: usize) -> S {
        let ab = self.alpha_bar[t];
        ab / (S::one() - ab)
    }
}
