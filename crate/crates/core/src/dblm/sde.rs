//! Learned alternative to the spectral std estimator: a small MLP on the radial
//! log spectrum of the input relative to a clean reference.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::spectrum::{radial_log_power, RadialSpectrum};
use crate::error::{Error, Result};
use crate::gaussian::{convolve, GaussianKernel};
use crate::grid::StdGrid;
use crate::image::ImageBuf;
use crate::params::{load_tensors, save_tensors, OptimizerState, Tensor};
use crate::scalar::Real;

const HIDDEN: usize = 32;
/// Log-power differences are clipped to this band and scaled to order one.
const FEATURE_CLIP: (f64, f64) = (-30.0, 5.0);
const FEATURE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct SdeConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Range of training blur stds.
    pub std_range: (f64, f64),
    /// Fraction of the corpus held out for the reported validation error.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self { iterations: 2000, batch: 16, lr: 1e-3, std_range: (0.1, 8.0), holdout: 0.125, seed: 0 }
    }
}

/// Trained regressor plus the reference spectrum its features are taken
/// against.
#[derive(Clone, Debug)]
pub struct SdeRegressor {
    reference: RadialSpectrum,
    grid: StdGrid,
    params: Vec<Tensor>,
}

#[derive(Debug)]
pub struct SdeOutcome {
    pub regressor: SdeRegressor,
    /// Mean absolute std error on held-out images over a sweep of stds.
    pub validation_mae: f64,
    /// Mean squared error per iteration.
    pub curve: Vec<f64>,
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

struct Trace {
    x: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
}

fn dense(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    b.iter().enumerate().map(|(o, &bo)| bo + w[o * x.len()..(o + 1) * x.len()].iter().zip(x).map(|(a, v)| a * v).sum::<f64>()).collect()
}

impl SdeRegressor {
    fn layout(bins: usize) -> Vec<Tensor> {
        vec![
            Tensor::zeros("fc1.weight", &[HIDDEN, bins]),
            Tensor::zeros("fc1.bias", &[HIDDEN]),
            Tensor::zeros("fc2.weight", &[HIDDEN, HIDDEN]),
            Tensor::zeros("fc2.bias", &[HIDDEN]),
            Tensor::zeros("fc3.weight", &[1, HIDDEN]),
            Tensor::zeros("fc3.bias", &[1]),
        ]
    }

    fn fresh(reference: RadialSpectrum, grid: StdGrid, offset: f64, seed: u64) -> Self {
        let mut params = Self::layout(reference.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (idx, fan_in) in [(0, reference.len()), (2, HIDDEN), (4, HIDDEN)] {
            let dist = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("positive std");
            params[idx].data.iter_mut().for_each(|v| *v = dist.sample(&mut rng));
        }
        params[5].data[0] = offset;
        Self { reference, grid, params }
    }

    pub fn reference(&self) -> &RadialSpectrum {
        &self.reference
    }

    fn features<S: Real>(&self, y: &ImageBuf<S>) -> Result<Vec<f64>> {
        let spec = radial_log_power(y)?;
        self.reference.check_compatible(&spec)?;
        Ok(spec
            .log_power()
            .iter()
            .zip(self.reference.log_power())
            .map(|(a, r)| (a - r).clamp(FEATURE_CLIP.0, FEATURE_CLIP.1) * FEATURE_SCALE)
            .collect())
    }

    fn run(&self, x: Vec<f64>) -> (f64, Trace) {
        let p = &self.params;
        let z1 = dense(&p[0].data, &p[1].data, &x);
        let a1: Vec<f64> = z1.iter().map(|&z| elu(z)).collect();
        let z2 = dense(&p[2].data, &p[3].data, &a1);
        let a2: Vec<f64> = z2.iter().map(|&z| elu(z)).collect();
        let out = dense(&p[4].data, &p[5].data, &a2)[0];
        (out, Trace { x, z1, a1, z2, a2 })
    }

    fn backward(&self, tr: &Trace, d_out: f64, grads: &mut [Vec<f64>]) {
        let p = &self.params;
        let mut d_a2 = vec![0.0; HIDDEN];
        for j in 0..HIDDEN {
            grads[4][j] += d_out * tr.a2[j];
            d_a2[j] = d_out * p[4].data[j];
        }
        grads[5][0] += d_out;
        let d_z2: Vec<f64> = d_a2.iter().zip(&tr.z2).map(|(d, &z)| d * elu_grad(z)).collect();
        let mut d_a1 = vec![0.0; HIDDEN];
        for o in 0..HIDDEN {
            grads[3][o] += d_z2[o];
            for i in 0..HIDDEN {
                grads[2][o * HIDDEN + i] += d_z2[o] * tr.a1[i];
                d_a1[i] += d_z2[o] * p[2].data[o * HIDDEN + i];
            }
        }
        let n = tr.x.len();
        for o in 0..HIDDEN {
            let d = d_a1[o] * elu_grad(tr.z1[o]);
            grads[1][o] += d;
            for i in 0..n {
                grads[0][o * n + i] += d * tr.x[i];
            }
        }
    }

    /// Predicted std, clamped to the grid range.
    pub fn predict<S: Real>(&self, y: &ImageBuf<S>) -> Result<f64> {
        let (out, _) = self.run(self.features(y)?);
        Ok(out.clamp(self.grid.min(), self.grid.max()))
    }

    /// Weights in the parameter-manifest layout plus `reference.tsv`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensors(dir, &self.params)?;
        self.reference.save(&dir.join("reference.tsv"))
    }

    pub fn load(dir: &Path, grid: StdGrid) -> Result<Self> {
        let reference = RadialSpectrum::load(&dir.join("reference.tsv"))?;
        let mut params = Self::layout(reference.len());
        load_tensors(dir, &mut params)?;
        Ok(Self { reference, grid, params })
    }
}

/// Trains on exact Gaussian blurs of the corpus with Adam on the squared std
/// error.
pub fn train_sde(corpus: &[ImageBuf<f64>], grid: &StdGrid, cfg: &SdeConfig) -> Result<SdeOutcome> {
    if corpus.len() < 2 {
        return Err(Error::Config("std regressor training needs at least two corpus images".into()));
    }
    let (lo, hi) = cfg.std_range;
    if !(lo > 0.0 && hi > lo) || cfg.batch == 0 || !(cfg.lr > 0.0) || !(0.0..1.0).contains(&cfg.holdout) {
        return Err(Error::Config(format!("invalid std regressor settings {cfg:?}")));
    }
    let held = ((corpus.len() as f64 * cfg.holdout).round() as usize).clamp(1, corpus.len() - 1);
    let (train, val) = corpus.split_at(corpus.len() - held);
    let reference = RadialSpectrum::reference(train)?;
    let mut net = SdeRegressor::fresh(reference, grid.clone(), 0.5 * (lo + hi), cfg.seed);
    let mut opt = OptimizerState::new(&net.params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5de_5de);
    let mut curve = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let mut loss = 0.0;
        for _ in 0..cfg.batch {
            let std = rng.random_range(lo..=hi);
            let x = &train[rng.random_range(0..train.len())];
            let y = convolve(x, &GaussianKernel::new(std)?);
            let (out, tr) = net.run(net.features(&y)?);
            let err = out - std;
            loss += err * err;
            net.backward(&tr, 2.0 * err / cfg.batch as f64, &mut grads);
        }
        loss /= cfg.batch as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration, reason: "non-finite std regression loss".into() });
        }
        opt.adam(&mut net.params, &grads, cfg.lr, 0.9);
        curve.push(loss);
    }
    let mut abs_err = 0.0;
    let mut count = 0;
    for x in val {
        for k in 0..8 {
            let std = lo + (hi - lo) * (k as f64 + 0.5) / 8.0;
            abs_err += (net.predict(&convolve(x, &GaussianKernel::new(std)?))? - std).abs();
            count += 1;
        }
    }
    Ok(SdeOutcome { regressor: net, validation_mae: abs_err / count as f64, curve })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_matches_finite_differences() {
        let reference = RadialSpectrum::new((1..=6).map(|k| k as f64 / 12.0).collect(), vec![0.0; 6]).unwrap();
        let net = SdeRegressor::fresh(reference, StdGrid::default(), 1.0, 3);
        let x = vec![0.3, -0.2, 0.5, -1.0, 0.1, 0.7];
        let mut grads: Vec<Vec<f64>> = net.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let (_, tr) = net.run(x.clone());
        net.backward(&tr, 1.0, &mut grads);
        let h = 1e-6;
        for (b, i) in [(0, 7), (1, 3), (2, 40), (3, 0), (4, 5), (5, 0)] {
            let (mut p, mut m) = (net.clone(), net.clone());
            p.params[b].data[i] += h;
            m.params[b].data[i] -= h;
            let fd = (p.run(x.clone()).0 - m.run(x.clone()).0) / (2.0 * h);
            assert!((fd - grads[b][i]).abs() < 1e-7, "{b}/{i}: {fd} vs {}", grads[b][i]);
        }
    }

    #[test]
    fn empty_corpus_is_configuration_error() {
        assert!(matches!(train_sde(&[], &StdGrid::default(), &SdeConfig::default()), Err(Error::Config(_))));
    }
}
