//! End-to-end restoration: blur-level mapping, guidance construction, starting
//! step selection and guided sampling.

use crate::dblm::{dblm_map, IdentityRestorer, Restorer, SpectralEstimator, WienerRestorer};
use crate::denoiser::Denoiser;
use crate::dgsa::ScaleAdjuster;
use crate::dsst::DssTable;
use crate::error::{Error, Result, StageExt};
use crate::gaussian::{convolve, GaussianKernel};
use crate::guidance::{guidance_stds, run_guided, GuidanceItem, GuidanceOptions, GuidanceSet, SamplerState, Trace};
use crate::image::{from_model_range, to_model_range, ImageBuf};
use crate::scalar::{lit, to_f64, Real};
use crate::schedule::DiffusionSchedule;

/// Default guidance weights for `n` measurements.
pub fn default_lambdas(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![0.8, 0.2],
        3 => vec![0.7, 0.2, 0.1],
        4 => vec![0.7, 0.1, 0.1, 0.1],
        _ => {
            let mut v = vec![0.7];
            v.extend(std::iter::repeat_n(0.3 / (n - 1) as f64, n - 1));
            v
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RestorerKind {
    Identity,
    /// Wiener deconvolution at the estimated std.
    Wiener,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub n_guidance: usize,
    pub lambdas: Vec<f64>,
    /// Offsets subtracted from the estimated std for items 2, 3, …
    pub std_offsets: Vec<f64>,
    pub guidance: GuidanceOptions,
    /// Pick each item's starting step from the table; otherwise start at `T - 1`.
    pub use_table: bool,
    pub restorer: RestorerKind,
    pub wiener_noise_power: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_guidance: 3,
            lambdas: default_lambdas(3),
            std_offsets: vec![1.0, 2.0, 3.0],
            guidance: GuidanceOptions::default(),
            use_table: true,
            restorer: RestorerKind::Wiener,
            wiener_noise_power: 1e-2,
        }
    }
}

impl PipelineConfig {
    /// Same configuration with `n` guidance items and the default weights for `n`.
    pub fn with_guidance_count(mut self, n: usize) -> Self {
        self.n_guidance = n;
        self.lambdas = default_lambdas(n);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_guidance == 0 {
            return Err(Error::param("n_guidance", "at least one guidance item is required"));
        }
        if self.lambdas.len() != self.n_guidance {
            return Err(Error::param(
                "lambda",
                format!("{} weights for {} guidance items", self.lambdas.len(), self.n_guidance),
            ));
        }
        if self.std_offsets.len() + 1 < self.n_guidance {
            return Err(Error::param(
                "std_offsets",
                format!("{} offsets cover only {} items", self.std_offsets.len(), self.std_offsets.len() + 1),
            ));
        }
        if !(self.guidance.s_base >= 0.0) {
            return Err(Error::param("s_base", format!("{} is negative", self.guidance.s_base)));
        }
        Ok(())
    }

    fn offsets(&self) -> Vec<f64> {
        std::iter::once(0.0).chain(self.std_offsets.iter().copied()).take(self.n_guidance).collect()
    }
}

/// Output of a restoration run.
#[derive(Clone, Debug)]
pub struct Restoration<S> {
    /// Restored image, unit range, clamped.
    pub output: ImageBuf<S>,
    pub std_hat: f64,
    /// Guidance measurements in unit range, item order.
    pub measurements: Vec<ImageBuf<S>>,
    pub initial_stds: Vec<f64>,
    pub final_stds: Vec<f64>,
    pub t_starts: Vec<usize>,
    /// Some std fell outside the table range and was clamped.
    pub start_clamped: bool,
    pub trace: Trace,
}

impl<S: Real> Restoration<S> {
    /// `||ý_1 - k_1 ⊗ out||²` per sample in unit range, with the refined item-1 std.
    pub fn consistency(&self) -> Result<f64> {
        let k = GaussianKernel::new(lit::<S>(self.final_stds[0]))?;
        let r = convolve(&self.output, &k).sub(&self.measurements[0])?;
        Ok(to_f64(r.sum_sq()) / r.len() as f64)
    }
}

/// Every component needed to restore images, shared read-only across runs.
pub struct Pipeline<'a, S: Real> {
    pub schedule: &'a DiffusionSchedule<S>,
    pub denoiser: &'a (dyn Denoiser<S> + 'a),
    pub estimator: &'a SpectralEstimator,
    pub table: Option<&'a DssTable>,
    pub adjuster: &'a (dyn ScaleAdjuster<S> + 'a),
    pub config: PipelineConfig,
}

impl<'a, S: Real> Pipeline<'a, S> {
    /// Full path from a degraded unit-range image.
    pub fn restore(&self, y: &ImageBuf<S>, seed: u64) -> Result<Restoration<S>> {
        self.config.validate().stage("config")?;
        let est = self.estimator.estimate(y).stage("estimate")?;
        let restored = match self.config.restorer {
            RestorerKind::Identity => IdentityRestorer.restore(y),
            RestorerKind::Wiener => {
                WienerRestorer::new(est.std_hat, self.config.wiener_noise_power).and_then(|r| r.restore(y))
            }
        }
        .stage("restore")?;
        let floor = self.estimator.grid().min();
        let stds = guidance_stds(est.std_hat, &self.config.offsets(), floor);
        let measurements = stds
            .iter()
            .map(|&s| dblm_map(&restored, &IdentityRestorer, s))
            .collect::<Result<Vec<_>>>()
            .stage("map")?;
        let mut out = self.sample(&measurements, &stds, seed)?;
        out.std_hat = est.std_hat;
        Ok(out)
    }

    /// Guided sampling from given unit-range measurements and initial stds.
    pub fn sample(&self, measurements: &[ImageBuf<S>], stds: &[f64], seed: u64) -> Result<Restoration<S>> {
        self.config.validate().stage("config")?;
        if measurements.len() != stds.len() || measurements.len() != self.config.n_guidance {
            return Err(Error::Dimension {
                expected: format!("{} guidance items", self.config.n_guidance),
                got: format!("{} measurements and {} stds", measurements.len(), stds.len()),
            })
            .stage("guidance");
        }
        let last = self.schedule.num_steps() - 1;
        let mut start_clamped = false;
        let t_starts: Vec<usize> = match (self.config.use_table, self.table) {
            (true, Some(table)) => {
                if table.num_steps() != self.schedule.num_steps() {
                    return Err(Error::Config(format!(
                        "table built for T = {} but schedule has T = {}",
                        table.num_steps(),
                        self.schedule.num_steps()
                    )))
                    .stage("table");
                }
                stds.iter()
                    .map(|&s| {
                        let l = table.lookup(s);
                        start_clamped |= l.clamped;
                        l.t_start.max(1)
                    })
                    .collect()
            }
            (true, None) => return Err(Error::Config("starting-step table required but not loaded".into())).stage("table"),
            (false, _) => vec![last; stds.len()],
        };
        let items = measurements
            .iter()
            .zip(stds)
            .zip(&t_starts)
            .zip(&self.config.lambdas)
            .map(|(((m, &s), &t), &w)| GuidanceItem { measurement: to_model_range(m), std: lit::<S>(s), weight: w, t_start: t })
            .collect();
        let gset = GuidanceSet::new(items).stage("guidance")?;
        let start = gset.global_start();
        let init_stds: Vec<S> = stds.iter().map(|&s| lit(s)).collect();
        let mut state = SamplerState::diffused(&gset.items()[0].measurement, start, init_stds, seed, self.schedule)
            .stage("sample")?;
        let mut opts = self.config.guidance;
        opts.std_max = self.estimator.grid().max();
        let trace = run_guided(&mut state, &gset, self.adjuster, self.denoiser, self.schedule, &opts).stage("sample")?;
        Ok(Restoration {
            output: from_model_range(&state.x_t).clamp_unit(),
            std_hat: stds[0],
            measurements: measurements.to_vec(),
            initial_stds: stds.to_vec(),
            final_stds: state.stds.iter().map(|&s| to_f64(s)).collect(),
            t_starts,
            start_clamped,
            trace,
        })
    }
}
