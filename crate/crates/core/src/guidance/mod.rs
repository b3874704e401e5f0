//! Guided reverse diffusion: data-fidelity gradients through the denoiser,
//! on-line Gaussian std refinement, scale-map application and staged
//! multi-measurement guidance.

mod trace;

pub use trace::{StepRecord, Trace};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, EpsModel};
use crate::dgsa::{ScaleAdjuster, ScaleMap};
use crate::error::{Error, Result};
use crate::gaussian::{convolve, convolve_std_derivative, GaussianKernel, DELTA_STD};
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};
use crate::schedule::DiffusionSchedule;

/// One guidance measurement with its blur std, weight and activation step.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceItem<S> {
    pub measurement: ImageBuf<S>,
    pub std: S,
    pub weight: f64,
    pub t_start: usize,
}

/// Guidance items ordered by descending std; item 0 is activated first.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSet<S> {
    items: Vec<GuidanceItem<S>>,
}

impl<S: Real> GuidanceSet<S> {
    pub fn new(items: Vec<GuidanceItem<S>>) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::param("items", "guidance set is empty"))?;
        for (i, it) in items.iter().enumerate() {
            first.measurement.check_shape(&it.measurement)?;
            if !(it.weight > 0.0) {
                return Err(Error::param("lambda", format!("item {} weight {} not positive", i + 1, it.weight)));
            }
            if !(to_f64(it.std) > 0.0) {
                return Err(Error::param("std", format!("item {} std {} not positive", i + 1, it.std)));
            }
        }
        for (i, w) in items.windows(2).enumerate() {
            if w[1].weight > w[0].weight {
                return Err(Error::param("lambda", format!("weights must be non-increasing (item {})", i + 2)));
            }
            if w[1].std > w[0].std {
                return Err(Error::param("std", format!("stds must be non-increasing (item {})", i + 2)));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[GuidanceItem<S>] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Step at which sampling starts: the latest activation of any item.
    pub fn global_start(&self) -> usize {
        self.items.iter().map(|i| i.t_start).max().unwrap_or(0)
    }

    pub fn is_active(&self, index: usize, t: usize) -> bool {
        t <= self.items[index].t_start
    }

    /// Weights renormalized over the items active at `t` (zero for inactive ones).
    pub fn active_weights(&self, t: usize) -> Vec<f64> {
        let total: f64 = self.items.iter().filter(|i| t <= i.t_start).map(|i| i.weight).sum();
        self.items
            .iter()
            .map(|i| if t <= i.t_start && total > 0.0 { i.weight / total } else { 0.0 })
            .collect()
    }
}

/// Guidance stds `{s, s - o_1, s - o_2, …}` floored at `floor`; offsets start at 0.
pub fn guidance_stds(std_hat: f64, offsets: &[f64], floor: f64) -> Vec<f64> {
    offsets.iter().map(|o| (std_hat - o).max(floor)).collect()
}

/// Chain state carried between reverse steps.
#[derive(Clone, Debug)]
pub struct SamplerState<S> {
    pub x_t: ImageBuf<S>,
    pub t: usize,
    /// Current refined std per guidance item.
    pub stds: Vec<S>,
    pub rng_seed: u64,
    rng: ChaCha8Rng,
}

impl<S: Real> SamplerState<S> {
    /// State at `x_t` with a fresh noise stream seeded by `seed`.
    pub fn new(x_t: ImageBuf<S>, t: usize, stds: Vec<S>, seed: u64) -> Self {
        Self { x_t, t, stds, rng_seed: seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Initializes at `t_start` by forward-diffusing `x0`, drawing the noise from
    /// the same stream the reverse steps use.
    pub fn diffused(x0: &ImageBuf<S>, t_start: usize, stds: Vec<S>, seed: u64, sched: &DiffusionSchedule<S>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w, c) = x0.shape();
        let noise = ImageBuf::standard_normal(h, w, c, &mut rng);
        let x_t = sched.q_sample(x0, t_start, &noise)?;
        Ok(Self { x_t, t: t_start, stds, rng_seed: seed, rng })
    }

    fn draw_noise(&mut self) -> ImageBuf<S> {
        let (h, w, c) = self.x_t.shape();
        ImageBuf::standard_normal(h, w, c, &mut self.rng)
    }
}

/// Knobs of the guided step that are not part of the guidance set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceOptions {
    /// Global factor multiplying the scale map.
    pub s_base: f64,
    /// Refine item stds on-line; when false the stds stay frozen.
    pub refine_std: bool,
    /// Extra factor on the std step `√ᾱ_t·w_i·∂std`; the squared residual is
    /// summed over pixels, so the useful size depends on the image area.
    pub std_rate: f64,
    /// Clamp range for refined stds.
    pub std_min: f64,
    pub std_max: f64,
}

impl Default for GuidanceOptions {
    fn default() -> Self {
        Self { s_base: 1.0, refine_std: true, std_rate: 0.1, std_min: DELTA_STD, std_max: 15.0 }
    }
}

/// `predict_x0` and its eps for the current state.
pub struct Linearization<S> {
    pub eps: ImageBuf<S>,
    pub x0: ImageBuf<S>,
}

pub fn linearize<S: Real, D: EpsModel<S> + ?Sized>(
    x_t: &ImageBuf<S>,
    t: usize,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
) -> Result<Linearization<S>> {
    let eps = denoiser.eps(x_t, t)?;
    let x0 = sched.predict_x0(x_t, t, &eps)?;
    Ok(Linearization { eps, x0 })
}

/// Residual `k_std ⊗ x0 - measurement`.
pub fn residual<S: Real>(x0: &ImageBuf<S>, measurement: &ImageBuf<S>, std: S) -> Result<ImageBuf<S>> {
    convolve(x0, &GaussianKernel::new(std)?).sub(measurement)
}

/// Gradient of the squared residual with respect to `x0`: `2 k ⊗ r`
/// (the symmetric kernel is its own adjoint under reflect boundaries only
/// approximately, so the adjoint is applied explicitly).
pub fn x0_cotangent<S: Real>(x0: &ImageBuf<S>, measurement: &ImageBuf<S>, std: S) -> Result<ImageBuf<S>> {
    let k = GaussianKernel::new(std)?;
    let r = convolve(x0, &k).sub(measurement)?;
    Ok(convolve_adjoint(&r, &k).scale(lit(2.0)))
}

/// Adjoint of reflect-boundary convolution.
pub fn convolve_adjoint<S: Real>(img: &ImageBuf<S>, k: &GaussianKernel<S>) -> ImageBuf<S> {
    if k.is_delta() {
        return img.clone();
    }
    crate::gaussian::convolve_separable_adjoint(img, k.taps(), k.taps())
}

/// Pulls an `x0`-cotangent back to `x_t` through `x0 = (x_t - sqrt(1-ab) eps(x_t)) / sqrt(ab)`.
pub fn pull_back<S: Real, D: Denoiser<S> + ?Sized>(
    x_t: &ImageBuf<S>,
    t: usize,
    cotangent: &ImageBuf<S>,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
) -> Result<ImageBuf<S>> {
    let ab = sched.alpha_bar(t);
    let vjp = denoiser.vjp(x_t, t, cotangent)?;
    let (inv, snab) = (S::one() / ab.sqrt(), (S::one() - ab).sqrt());
    cotangent.zip_map(&vjp, |c, v| inv * (c - snab * v))
}

fn check_active<S: Real>(gset: &GuidanceSet<S>, index: usize, t: usize) -> Result<()> {
    if index >= gset.len() {
        return Err(Error::Contract(format!("no guidance item {}", index + 1)));
    }
    if !gset.is_active(index, t) {
        return Err(Error::Contract(format!(
            "item {} is inactive at t = {t} (starts at {})",
            index + 1,
            gset.items[index].t_start
        )));
    }
    Ok(())
}

/// `∇_{x_t} ||ý_i - k_i ⊗ x0(x_t)||²` for item `index` at its current std.
pub fn fidelity_gradient<S: Real, D: Denoiser<S> + ?Sized>(
    state: &SamplerState<S>,
    gset: &GuidanceSet<S>,
    index: usize,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
) -> Result<ImageBuf<S>> {
    check_active(gset, index, state.t)?;
    let lin = linearize(&state.x_t, state.t, denoiser, sched)?;
    let cot = x0_cotangent(&lin.x0, &gset.items[index].measurement, state.stds[index])?;
    pull_back(&state.x_t, state.t, &cot, denoiser, sched)
}

/// `d/d std ||ý - k_std ⊗ x0||² = 2 <∂_std k ⊗ x0, k ⊗ x0 - ý>`; `None` on the
/// delta branch where the derivative is undefined.
pub fn std_gradient_at<S: Real>(x0: &ImageBuf<S>, measurement: &ImageBuf<S>, std: S) -> Result<Option<S>> {
    let k = GaussianKernel::new(std)?;
    if k.is_delta() {
        return Ok(None);
    }
    let r = convolve(x0, &k).sub(measurement)?;
    let dk = convolve_std_derivative(x0, &k)?;
    Ok(Some(lit::<S>(2.0) * dk.dot(&r)?))
}

/// Std gradient for item `index` at the state's current linearization.
pub fn std_gradient<S: Real, D: EpsModel<S> + ?Sized>(
    state: &SamplerState<S>,
    gset: &GuidanceSet<S>,
    index: usize,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
) -> Result<Option<S>> {
    check_active(gset, index, state.t)?;
    let lin = linearize(&state.x_t, state.t, denoiser, sched)?;
    std_gradient_at(&lin.x0, &gset.items[index].measurement, state.stds[index])
}

/// Diagnostics of one guided step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Timestep the step started from.
    pub t: usize,
    /// `||ý_1 - k_1 ⊗ x0||²` per sample, at the start of the step.
    pub residual: f64,
    pub mean_scale: f64,
    pub weights: Vec<f64>,
    /// Norm of each item's weighted x0-cotangent (zero when inactive).
    pub cotangent_norms: Vec<f64>,
    /// Items whose std update was skipped on the delta branch.
    pub std_skipped: Vec<bool>,
}

/// One reverse step from `state.t` to `state.t - 1` with guidance.
pub fn guided_step<S, D, A>(
    state: &mut SamplerState<S>,
    gset: &GuidanceSet<S>,
    adjuster: &A,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
    opts: &GuidanceOptions,
) -> Result<StepReport>
where
    S: Real,
    D: Denoiser<S> + ?Sized,
    A: ScaleAdjuster<S> + ?Sized,
{
    let t = state.t;
    if t == 0 {
        return Err(Error::Contract("no step below t = 0".into()));
    }
    if t > gset.global_start() {
        return Err(Error::Contract(format!("t = {t} is above the global start {}", gset.global_start())));
    }
    if state.stds.len() != gset.len() {
        return Err(Error::Dimension {
            expected: format!("{} stds", gset.len()),
            got: format!("{} stds", state.stds.len()),
        });
    }
    let weights = gset.active_weights(t);
    if weights.iter().all(|&w| w == 0.0) {
        return Err(Error::Contract(format!("no guidance item active at t = {t}")));
    }

    let lin = linearize(&state.x_t, t, denoiser, sched)?;
    let noise = state.draw_noise();
    let x_prime = sched.reverse_step_mean(&state.x_t, t, &lin.eps, &noise)?;

    let first = &gset.items[0];
    let residual = to_f64(residual(&lin.x0, &first.measurement, state.stds[0])?.sum_sq()) / lin.x0.len() as f64;
    let scale = adjuster.adjust(&first.measurement, &lin.x0, t)?;
    lin.x0.check_shape(scale.values())?;

    let mut total_cot = ImageBuf::zeros_like(&lin.x0);
    let mut cotangent_norms = vec![0.0; gset.len()];
    let mut std_grads: Vec<Option<S>> = vec![None; gset.len()];
    for (i, (item, &w)) in gset.items.iter().zip(&weights).enumerate() {
        if w == 0.0 {
            continue;
        }
        let cot = x0_cotangent(&lin.x0, &item.measurement, state.stds[i])?;
        cotangent_norms[i] = w * to_f64(cot.sum_sq()).sqrt();
        total_cot.axpy(lit(w), &cot)?;
        if opts.refine_std {
            std_grads[i] = std_gradient_at(&lin.x0, &item.measurement, state.stds[i])?;
        }
    }

    let next = if scale.is_zero() || opts.s_base == 0.0 {
        x_prime
    } else {
        let grad = pull_back(&state.x_t, t, &total_cot, denoiser, sched)?;
        let sb = lit::<S>(opts.s_base);
        let step = scale.values().zip_map(&grad, |a, g| sb * a * g)?;
        x_prime.sub(&step)?
    };

    let sqrt_ab = sched.alpha_bar(t).sqrt();
    let mut std_skipped = vec![false; gset.len()];
    for (i, &w) in weights.iter().enumerate() {
        if w == 0.0 || !opts.refine_std {
            continue;
        }
        match std_grads[i] {
            Some(g) => {
                let updated = state.stds[i] - sqrt_ab * lit::<S>(w * opts.std_rate) * g;
                let clamped = to_f64(updated).clamp(opts.std_min, opts.std_max);
                state.stds[i] = if to_f64(updated).is_finite() { lit(clamped) } else { state.stds[i] };
            }
            None => std_skipped[i] = true,
        }
    }

    if !next.is_finite() {
        return Err(Error::Contract(format!("guided step at t = {t} produced non-finite values")));
    }
    state.x_t = next;
    state.t = t - 1;
    Ok(StepReport {
        t,
        residual,
        mean_scale: to_f64(scale.mean()),
        weights,
        cotangent_norms,
        std_skipped,
    })
}

/// Runs guided steps from the state's timestep down to 0, recording a trace.
pub fn run_guided<S, D, A>(
    state: &mut SamplerState<S>,
    gset: &GuidanceSet<S>,
    adjuster: &A,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
    opts: &GuidanceOptions,
) -> Result<Trace>
where
    S: Real,
    D: Denoiser<S> + ?Sized,
    A: ScaleAdjuster<S> + ?Sized,
{
    let mut trace = Trace::default();
    while state.t > 0 {
        let report = guided_step(state, gset, adjuster, denoiser, sched, opts)?;
        trace.push(StepRecord {
            t: report.t,
            residual: report.residual,
            stds: state.stds.iter().map(|&s| to_f64(s)).collect(),
            mean_scale: report.mean_scale,
            active: report.weights.iter().map(|&w| w > 0.0).collect(),
        });
    }
    Ok(trace)
}

/// Plain ancestral sampling from the state's timestep down to 0.
pub fn run_unguided<S: Real, D: EpsModel<S> + ?Sized>(
    state: &mut SamplerState<S>,
    denoiser: &D,
    sched: &DiffusionSchedule<S>,
) -> Result<()> {
    while state.t > 0 {
        let eps = denoiser.eps(&state.x_t, state.t)?;
        let noise = state.draw_noise();
        state.x_t = sched.reverse_step_mean(&state.x_t, state.t, &eps, &noise)?;
        state.t -= 1;
    }
    Ok(())
}

/// Scale map of zeros, used to switch guidance off.
pub fn zero_map<S: Real>(like: &ImageBuf<S>) -> ScaleMap<S> {
    ScaleMap::constant(like, S::zero())
}
