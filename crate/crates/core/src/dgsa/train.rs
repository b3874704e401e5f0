//! Two-stage training of the convolutional adjuster.
//!
//! Each training episode takes a clean image, forms a measurement, draws a
//! timestep at or below the measurement's starting step, diffuses the clean
//! image to `x_t`, takes one guided step with the net's scale map and scores
//! the clean estimate at `t - 1` against the truth. The gradient flows through
//! the step and the frozen denoiser back to the map.
//!
//! Stage one uses exact Gaussian blurs of the clean image as measurements;
//! stage two uses the blur-level mapping of fully degraded inputs with the
//! estimated std.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dblm::{dblm_map, IdentityRestorer, Restorer, SpectralEstimator, WienerRestorer};
use crate::degrade::{degrade, DegradationParams};
use crate::denoiser::Denoiser;
use crate::dsst::DssTable;
use crate::error::{Error, Result};
use crate::gaussian::{convolve, GaussianKernel};
use crate::image::{to_model_range, ImageBuf};
use crate::schedule::DiffusionSchedule;

use super::loss::{dgsa_loss, dgsa_loss_grad, DEFAULT_GAMMA};
use super::net::DgsaNet;
use crate::params::OptimizerState;
use super::{ScaleAdjuster, ScaleMap};
use crate::guidance::{linearize, pull_back, x0_cotangent};

/// Parameter update rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimizer {
    /// Heavy-ball SGD: `v = μ v + g`, `w -= lr v`.
    Sgd,
    /// Adam with `β1 = momentum`, `β2 = 0.999`, `ε = 1e-8`.
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1_iters: usize,
    pub stage2_iters: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub gamma: [f64; 4],
    /// Global factor on the scale map, as in sampling.
    pub s_base: f64,
    /// Range of the blur std drawn for each episode.
    pub std_range: (f64, f64),
    pub wiener_noise_power: f64,
    /// Corpus images held out to score checkpoints; 0 keeps the final net.
    pub holdout: usize,
    /// Iterations between checkpoint scores.
    pub validate_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_iters: 2000,
            stage2_iters: 700,
            optimizer: Optimizer::Adam,
            lr: 3e-4,
            momentum: 0.9,
            batch: 8,
            gamma: DEFAULT_GAMMA,
            s_base: 1.0,
            std_range: (1.0, 8.0),
            wiener_noise_power: 1e-2,
            holdout: 32,
            validate_every: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::param("batch", "must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::param("lr", format!("{} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::param("momentum", format!("{} outside [0, 1)", self.momentum)));
        }
        if self.holdout > 0 && self.validate_every == 0 {
            return Err(Error::param("validate_every", "must be at least 1 when images are held out"));
        }
        let (lo, hi) = self.std_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::param("std_range", format!("[{lo}, {hi}] is not a positive interval")));
        }
        Ok(())
    }
}

/// Frozen components the episodes run through.
pub struct TrainContext<'a> {
    pub denoiser: &'a (dyn Denoiser<f64> + 'a),
    pub schedule: &'a DiffusionSchedule<f64>,
    pub table: &'a DssTable,
    pub estimator: &'a SpectralEstimator,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    /// Exact Gaussian-blurred measurements.
    Blur,
    /// Mapped measurements from fully degraded inputs.
    Mapped,
}

/// One fully specified training or validation draw, in the model range.
#[derive(Clone, Debug)]
pub struct Episode {
    pub clean: ImageBuf<f64>,
    pub measurement: ImageBuf<f64>,
    pub std: f64,
    pub t: usize,
    pub forward_noise: ImageBuf<f64>,
    pub step_noise: ImageBuf<f64>,
}

/// Draws an episode from a unit-range clean image.
pub fn draw_episode<R: Rng>(
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    clean_unit: &ImageBuf<f64>,
    rng: &mut R,
) -> Result<Episode> {
    let (lo, hi) = cfg.std_range;
    let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let (measurement_unit, std) = match stage {
        Stage::Blur => (convolve(clean_unit, &GaussianKernel::new(sigma)?), sigma),
        Stage::Mapped => mapped_measurement(ctx, cfg, clean_unit, sigma, rng)?,
    };
    let t_start = ctx.table.lookup(std).t_start.max(1);
    let t = rng.random_range(1..=t_start);
    let (h, w, c) = clean_unit.shape();
    Ok(Episode {
        clean: to_model_range(clean_unit),
        measurement: to_model_range(&measurement_unit),
        std,
        t,
        forward_noise: ImageBuf::standard_normal(h, w, c, rng),
        step_noise: ImageBuf::standard_normal(h, w, c, rng),
    })
}

/// Degrades, estimates and maps; draws whose degradation leaves nothing to
/// analyse (a flat image) are redrawn a few times.
fn mapped_measurement<R: Rng>(
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    clean_unit: &ImageBuf<f64>,
    sigma: f64,
    rng: &mut R,
) -> Result<(ImageBuf<f64>, f64)> {
    let mut last = None;
    for _ in 0..8 {
        let params =
            DegradationParams::new(sigma, rng.random_range(1.0..=4.0), rng.random_range(0.0..=10.0), rng.random_range(60..=95))?;
        let y = degrade(clean_unit, &params, rng.random())?;
        match ctx.estimator.estimate(&y) {
            Ok(est) => {
                let restored = WienerRestorer::new(est.std_hat, cfg.wiener_noise_power)?.restore(&y)?;
                return Ok((dblm_map(&restored, &IdentityRestorer, est.std_hat)?, est.std_hat));
            }
            Err(e @ Error::Estimation { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Deterministic held-out episodes, one per image.
pub fn validation_episodes(
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    stage: Stage,
    images: &[ImageBuf<f64>],
    seed: u64,
) -> Result<Vec<Episode>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    images.iter().map(|x| draw_episode(ctx, cfg, stage, x, &mut rng)).collect()
}

/// Everything about a step that does not depend on the scale map.
struct StepParts {
    x0_hat: ImageBuf<f64>,
    unguided: ImageBuf<f64>,
    gradient: ImageBuf<f64>,
}

fn step_parts(ctx: &TrainContext<'_>, ep: &Episode) -> Result<StepParts> {
    let sched = ctx.schedule;
    let x_t = sched.q_sample(&ep.clean, ep.t, &ep.forward_noise)?;
    let lin = linearize(&x_t, ep.t, ctx.denoiser, sched)?;
    let cot = x0_cotangent(&lin.x0, &ep.measurement, ep.std)?;
    let gradient = pull_back(&x_t, ep.t, &cot, ctx.denoiser, sched)?;
    let unguided = sched.reverse_step_mean(&x_t, ep.t, &lin.eps, &ep.step_noise)?;
    Ok(StepParts { x0_hat: lin.x0, unguided, gradient })
}

fn next_state(parts: &StepParts, scale: &ImageBuf<f64>, s_base: f64) -> Result<ImageBuf<f64>> {
    let step = scale.zip_map(&parts.gradient, |a, g| s_base * a * g)?;
    parts.unguided.sub(&step)
}

/// Loss of one episode under any adjuster.
pub fn episode_loss(
    adjuster: &dyn ScaleAdjuster<f64>,
    ep: &Episode,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let parts = step_parts(ctx, ep)?;
    let scale = adjuster.adjust(&ep.measurement, &parts.x0_hat, ep.t)?;
    let next = next_state(&parts, scale.values(), cfg.s_base)?;
    let pred = linearize(&next, ep.t - 1, ctx.denoiser, ctx.schedule)?.x0;
    dgsa_loss(&pred, &ep.clean, cfg.gamma)
}

/// Scale map the adjuster produces at an episode's step.
pub fn episode_scale_map(
    adjuster: &dyn ScaleAdjuster<f64>,
    ep: &Episode,
    ctx: &TrainContext<'_>,
) -> Result<ScaleMap<f64>> {
    let parts = step_parts(ctx, ep)?;
    adjuster.adjust(&ep.measurement, &parts.x0_hat, ep.t)
}

pub fn mean_loss(
    adjuster: &dyn ScaleAdjuster<f64>,
    episodes: &[Episode],
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        total += episode_loss(adjuster, ep, ctx, cfg)?;
    }
    Ok(total / episodes.len().max(1) as f64)
}

/// Loss of one episode, accumulating parameter gradients into `grads`.
fn episode_backprop(
    net: &DgsaNet,
    ep: &Episode,
    ctx: &TrainContext<'_>,
    cfg: &TrainConfig,
    grads: &mut [Vec<f64>],
) -> Result<f64> {
    let parts = step_parts(ctx, ep)?;
    let (scale, cache) = net.forward(&ep.measurement, &parts.x0_hat, ep.t)?;
    let next = next_state(&parts, &scale, cfg.s_base)?;
    let prev = ep.t - 1;
    let pred = linearize(&next, prev, ctx.denoiser, ctx.schedule)?.x0;
    let (loss, d_pred) = dgsa_loss_grad(&pred, &ep.clean, cfg.gamma)?;
    let d_next = pull_back(&next, prev, &d_pred, ctx.denoiser, ctx.schedule)?;
    let d_scale = parts.gradient.zip_map(&d_next, |g, d| -cfg.s_base * g * d)?;
    net.backward(&cache, &d_scale, grads)?;
    Ok(loss)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub stage: Stage,
    pub iteration: usize,
    /// Mean loss over the batch.
    pub loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub net: DgsaNet,
    pub curve: Vec<CurvePoint>,
    /// Held-out loss of each scored checkpoint; `net` is the best of them.
    pub validation: Vec<CurvePoint>,
    /// Set when a non-finite loss or parameter stopped training; `net` then
    /// holds the last finite parameters.
    pub diverged: Option<Error>,
}

impl TrainOutcome {
    /// `stage<TAB>iteration<TAB>loss` lines with a header.
    pub fn curve_text(&self) -> String {
        let mut s = String::from("stage\titeration\tloss\n");
        for p in &self.curve {
            let stage = match p.stage {
                Stage::Blur => "blur",
                Stage::Mapped => "mapped",
            };
            s.push_str(&format!("{stage}\t{}\t{}\n", p.iteration, p.loss));
        }
        s
    }
}

/// Trains a fresh net on unit-range clean images.
pub fn train_dgsa(ctx: &TrainContext<'_>, corpus: &[ImageBuf<f64>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = corpus.first().ok_or_else(|| Error::param("corpus", "no training images"))?;
    let net = DgsaNet::new(first.channels(), cfg.seed)?;
    train_from(net, ctx, corpus, cfg)
}

/// Continues training an existing net. With a holdout, the last
/// `cfg.holdout` corpus images are kept out of training and the returned net
/// is the checkpoint (the starting net included) with the lowest loss on
/// mapped episodes drawn from them.
pub fn train_from(
    mut net: DgsaNet,
    ctx: &TrainContext<'_>,
    corpus: &[ImageBuf<f64>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if corpus.len() <= cfg.holdout {
        return Err(Error::param(
            "corpus",
            format!("{} images leave none for training after holding out {}", corpus.len(), cfg.holdout),
        ));
    }
    let (train, held) = corpus.split_at(corpus.len() - cfg.holdout);
    let val = validation_episodes(ctx, cfg, Stage::Mapped, held, cfg.seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d65a);
    let mut opt = OptimizerState::new(net.params());
    let mut curve = Vec::with_capacity(cfg.stage1_iters + cfg.stage2_iters);
    let mut validation = Vec::new();
    let mut best: Option<(f64, DgsaNet)> = None;
    let mut score = |net: &DgsaNet, stage: Stage, iteration: usize, validation: &mut Vec<CurvePoint>| -> Result<()> {
        if val.is_empty() {
            return Ok(());
        }
        let loss = mean_loss(net, &val, ctx, cfg)?;
        validation.push(CurvePoint { stage, iteration, loss });
        if loss.is_finite() && best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, net.clone()));
        }
        Ok(())
    };
    score(&net, Stage::Blur, 0, &mut validation)?;
    let schedule = [(Stage::Blur, cfg.stage1_iters), (Stage::Mapped, cfg.stage2_iters)];
    let mut diverged = None;
    'stages: for (stage, iters) in schedule {
        for iteration in 0..iters {
            let mut grads = net.zero_grads();
            let mut loss = 0.0;
            for _ in 0..cfg.batch {
                let x = &train[rng.random_range(0..train.len())];
                let ep = draw_episode(ctx, cfg, stage, x, &mut rng)?;
                loss += episode_backprop(&net, &ep, ctx, cfg, &mut grads)?;
            }
            loss /= cfg.batch as f64;
            let finite_grads = grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
            if !loss.is_finite() || !finite_grads {
                let reason = format!("non-finite loss or gradient in {stage:?} stage");
                diverged = Some(Error::Diverged { iteration, reason });
                break 'stages;
            }
            let previous = net.clone();
            let scale = 1.0 / cfg.batch as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= scale);
            match cfg.optimizer {
                Optimizer::Sgd => opt.sgd(net.params_mut(), &grads, cfg.lr, cfg.momentum),
                Optimizer::Adam => opt.adam(net.params_mut(), &grads, cfg.lr, cfg.momentum),
            }
            if !net.is_finite() {
                let reason = format!("parameters became non-finite in {stage:?} stage");
                net = previous;
                diverged = Some(Error::Diverged { iteration, reason });
                break 'stages;
            }
            curve.push(CurvePoint { stage, iteration, loss });
            if (iteration + 1) % cfg.validate_every.max(1) == 0 || iteration + 1 == iters {
                score(&net, stage, iteration + 1, &mut validation)?;
            }
        }
    }
    if let Some((_, b)) = best {
        net = b;
    }
    Ok(TrainOutcome { net, curve, validation, diverged })
}
