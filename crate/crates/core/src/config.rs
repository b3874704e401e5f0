//! Flat `key = value` run configuration.
//!
//! Lines are UTF-8, `#` starts a comment, blank lines are ignored. Every key
//! has a default; unknown keys and out-of-range values are rejected with the
//! offending line number. Lists are comma separated. Relative paths are
//! resolved against the directory holding the config file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::dgsa::{Optimizer, TrainConfig, DEFAULT_GAMMA};
use crate::error::{Error, Result};
use crate::grid::StdGrid;
use crate::guidance::GuidanceOptions;
use crate::pipeline::{default_lambdas, PipelineConfig, RestorerKind};
use crate::schedule::{make_schedule, DiffusionSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjusterKind {
    Constant,
    Variance,
    Dgsa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DenoiserKind {
    Gmm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub std_min: f64,
    pub std_max: f64,
    pub std_step: f64,
    pub tol: f64,
    pub xi: f64,
    pub n_guidance: usize,
    pub lambdas: Vec<f64>,
    pub std_offsets: Vec<f64>,
    pub s_base: f64,
    pub std_rate: f64,
    pub refine_std: bool,
    pub use_table: bool,
    pub restorer: RestorerKind,
    pub noise_power: f64,
    pub adjuster: AdjusterKind,
    pub adjuster_scale: f64,
    pub variance_window: usize,
    pub variance_pivot: f64,
    pub denoiser: DenoiserKind,
    pub gmm_components: usize,
    pub gmm_em_iters: usize,
    pub corpus_size: usize,
    pub image_size: usize,
    pub corpus_seed: u64,
    /// Directory of clean images to ingest instead of the synthetic corpus.
    pub corpus_dir: Option<PathBuf>,
    pub seed: u64,
    pub train_stage1: usize,
    pub train_stage2: usize,
    pub train_optimizer: Optimizer,
    pub train_lr: f64,
    pub train_momentum: f64,
    pub train_batch: usize,
    pub train_holdout: usize,
    pub train_validate_every: usize,
    pub gamma: [f64; 4],
    pub sde_iters: usize,
    pub table_path: PathBuf,
    pub prior_dir: PathBuf,
    pub reference_path: PathBuf,
    pub dgsa_dir: PathBuf,
    pub sde_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            std_min: 0.1,
            std_max: 15.0,
            std_step: 0.1,
            tol: 1e-3,
            xi: 1e-3,
            n_guidance: 3,
            lambdas: default_lambdas(3),
            std_offsets: vec![1.0, 2.0, 3.0],
            s_base: 1.0,
            std_rate: 0.1,
            refine_std: true,
            use_table: true,
            restorer: RestorerKind::Wiener,
            noise_power: 1e-2,
            adjuster: AdjusterKind::Constant,
            adjuster_scale: 1.0,
            variance_window: 5,
            variance_pivot: 0.01,
            denoiser: DenoiserKind::Gmm,
            gmm_components: 8,
            gmm_em_iters: 10,
            corpus_size: 256,
            image_size: 32,
            corpus_seed: 1,
            corpus_dir: None,
            seed: 0,
            train_stage1: 2000,
            train_stage2: 700,
            train_optimizer: Optimizer::Adam,
            train_lr: 3e-4,
            train_momentum: 0.9,
            train_batch: 8,
            train_holdout: 32,
            train_validate_every: 50,
            gamma: DEFAULT_GAMMA,
            sde_iters: 2000,
            table_path: PathBuf::from("dsst.tsv"),
            prior_dir: PathBuf::from("prior"),
            reference_path: PathBuf::from("reference.tsv"),
            dgsa_dir: PathBuf::from("dgsa"),
            sde_dir: PathBuf::from("sde"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
    v.parse::<T>().map_err(|_| format!("`{v}` is not a valid value for {key}"))
}

fn parse_list(key: &str, v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',').map(|s| parse_num::<f64>(key, s.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("`{v}` is not a boolean for {key}")),
    }
}

fn join_list(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses config text; relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        for p in [&mut cfg.table_path, &mut cfg.prior_dir, &mut cfg.reference_path, &mut cfg.dgsa_dir, &mut cfg.sde_dir] {
            *p = base.join(&*p);
        }
        let mut lambdas_set = false;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if key == "lambdas" {
                lambdas_set = true;
            }
            cfg.set(key, value, base).map_err(|m| Error::Config(format!("line {}: {m}", i + 1)))?;
        }
        if !lambdas_set {
            cfg.lambdas = default_lambdas(cfg.n_guidance);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, v: &str, base: &Path) -> std::result::Result<(), String> {
        let path = |v: &str| base.join(v);
        match key {
            "steps" => self.steps = parse_num(key, v)?,
            "beta_start" => self.beta_start = parse_num(key, v)?,
            "beta_end" => self.beta_end = parse_num(key, v)?,
            "std_min" => self.std_min = parse_num(key, v)?,
            "std_max" => self.std_max = parse_num(key, v)?,
            "std_step" => self.std_step = parse_num(key, v)?,
            "tol" => self.tol = parse_num(key, v)?,
            "xi" => self.xi = parse_num(key, v)?,
            "n_guidance" => self.n_guidance = parse_num(key, v)?,
            "lambdas" => self.lambdas = parse_list(key, v)?,
            "std_offsets" => self.std_offsets = parse_list(key, v)?,
            "s_base" => self.s_base = parse_num(key, v)?,
            "std_rate" => self.std_rate = parse_num(key, v)?,
            "refine_std" => self.refine_std = parse_bool(key, v)?,
            "use_table" => self.use_table = parse_bool(key, v)?,
            "restorer" => {
                self.restorer = match v {
                    "wiener" => RestorerKind::Wiener,
                    "identity" => RestorerKind::Identity,
                    _ => return Err(format!("unknown restorer `{v}` (wiener, identity)")),
                }
            }
            "noise_power" => self.noise_power = parse_num(key, v)?,
            "adjuster" => {
                self.adjuster = match v {
                    "constant" => AdjusterKind::Constant,
                    "variance" => AdjusterKind::Variance,
                    "dgsa" => AdjusterKind::Dgsa,
                    _ => return Err(format!("unknown adjuster `{v}` (constant, variance, dgsa)")),
                }
            }
            "adjuster_scale" => self.adjuster_scale = parse_num(key, v)?,
            "variance_window" => self.variance_window = parse_num(key, v)?,
            "variance_pivot" => self.variance_pivot = parse_num(key, v)?,
            "denoiser" => {
                self.denoiser = match v {
                    "gmm" => DenoiserKind::Gmm,
                    _ => return Err(format!("unknown denoiser `{v}` (gmm)")),
                }
            }
            "gmm_components" => self.gmm_components = parse_num(key, v)?,
            "gmm_em_iters" => self.gmm_em_iters = parse_num(key, v)?,
            "corpus_size" => self.corpus_size = parse_num(key, v)?,
            "image_size" => self.image_size = parse_num(key, v)?,
            "corpus_seed" => self.corpus_seed = parse_num(key, v)?,
            "corpus_dir" => self.corpus_dir = Some(path(v)),
            "seed" => self.seed = parse_num(key, v)?,
            "train_stage1" => self.train_stage1 = parse_num(key, v)?,
            "train_stage2" => self.train_stage2 = parse_num(key, v)?,
            "train_optimizer" => {
                self.train_optimizer = match v {
                    "sgd" => Optimizer::Sgd,
                    "adam" => Optimizer::Adam,
                    _ => return Err(format!("unknown optimizer `{v}` (sgd, adam)")),
                }
            }
            "train_lr" => self.train_lr = parse_num(key, v)?,
            "train_momentum" => self.train_momentum = parse_num(key, v)?,
            "train_batch" => self.train_batch = parse_num(key, v)?,
            "train_holdout" => self.train_holdout = parse_num(key, v)?,
            "train_validate_every" => self.train_validate_every = parse_num(key, v)?,
            "gamma" => {
                let g = parse_list(key, v)?;
                self.gamma = g.try_into().map_err(|_| "gamma needs exactly four values".to_string())?;
            }
            "sde_iters" => self.sde_iters = parse_num(key, v)?,
            "table_path" => self.table_path = path(v),
            "prior_dir" => self.prior_dir = path(v),
            "reference_path" => self.reference_path = path(v),
            "dgsa_dir" => self.dgsa_dir = path(v),
            "sde_dir" => self.sde_dir = path(v),
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.steps < 2 {
            return bad(format!("steps = {} must be at least 2", self.steps));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return bad(format!("beta range [{}, {}] must satisfy 0 < start <= end < 1", self.beta_start, self.beta_end));
        }
        if !(0.0 < self.std_min && self.std_min < self.std_max && self.std_step > 0.0) {
            return bad(format!("std grid {}..{} step {} is not valid", self.std_min, self.std_max, self.std_step));
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad(format!("tol = {} outside (0, 1)", self.tol));
        }
        if !(self.xi > 0.0) {
            return bad(format!("xi = {} must be positive", self.xi));
        }
        if self.n_guidance == 0 || self.lambdas.len() != self.n_guidance {
            return bad(format!("{} lambdas for n_guidance = {}", self.lambdas.len(), self.n_guidance));
        }
        if self.lambdas.iter().any(|&l| !(l > 0.0)) || self.lambdas.windows(2).any(|w| w[1] > w[0]) {
            return bad("lambdas must be positive and non-increasing".into());
        }
        if self.std_offsets.len() + 1 < self.n_guidance || self.std_offsets.iter().any(|&o| !(o >= 0.0)) {
            return bad(format!("std_offsets must hold n_guidance - 1 = {} non-negative values", self.n_guidance - 1));
        }
        if !(self.s_base >= 0.0) || !(self.std_rate >= 0.0) {
            return bad("s_base and std_rate must be non-negative".into());
        }
        if !(self.noise_power > 0.0) {
            return bad(format!("noise_power = {} must be positive", self.noise_power));
        }
        if !(0.0..=1.0).contains(&self.adjuster_scale) {
            return bad(format!("adjuster_scale = {} outside [0, 1]", self.adjuster_scale));
        }
        if self.variance_window < 3 || self.variance_window % 2 == 0 || !(self.variance_pivot > 0.0) {
            return bad("variance_window must be odd >= 3 and variance_pivot positive".into());
        }
        if self.gmm_components == 0 || self.corpus_size == 0 {
            return bad("gmm_components and corpus_size must be positive".into());
        }
        if ![16, 32, 64].contains(&self.image_size) {
            return bad(format!("image_size = {} must be 16, 32 or 64", self.image_size));
        }
        if self.train_holdout >= self.corpus_size && self.corpus_dir.is_none() {
            return bad(format!("train_holdout = {} leaves no training images", self.train_holdout));
        }
        if self.train_holdout > 0 && self.train_validate_every == 0 {
            return bad("train_validate_every must be positive when images are held out".into());
        }
        if self.train_batch == 0 || !(self.train_lr > 0.0) || !(0.0..1.0).contains(&self.train_momentum) {
            return bad("train_batch >= 1, train_lr > 0 and train_momentum in [0, 1) are required".into());
        }
        if self.gamma.iter().any(|&g| !(g >= 0.0)) {
            return bad("gamma weights must be non-negative".into());
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule<f64>> {
        make_schedule(self.steps, self.beta_start, self.beta_end)
    }

    pub fn grid(&self) -> Result<StdGrid> {
        StdGrid::new(self.std_min, self.std_max, self.std_step)
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            n_guidance: self.n_guidance,
            lambdas: self.lambdas.clone(),
            std_offsets: self.std_offsets.clone(),
            guidance: GuidanceOptions {
                s_base: self.s_base,
                refine_std: self.refine_std,
                std_rate: self.std_rate,
                std_min: GuidanceOptions::default().std_min,
                std_max: self.std_max,
            },
            use_table: self.use_table,
            restorer: self.restorer,
            wiener_noise_power: self.noise_power,
        }
    }

    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            stage1_iters: self.train_stage1,
            stage2_iters: self.train_stage2,
            optimizer: self.train_optimizer,
            lr: self.train_lr,
            momentum: self.train_momentum,
            batch: self.train_batch,
            holdout: self.train_holdout,
            validate_every: self.train_validate_every,
            gamma: self.gamma,
            s_base: self.s_base,
            wiener_noise_power: self.noise_power,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    /// Renders every key; parsing the output gives back the same config when
    /// paths are absolute or `base` matches.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let restorer = match self.restorer {
            RestorerKind::Wiener => "wiener",
            RestorerKind::Identity => "identity",
        };
        let adjuster = match self.adjuster {
            AdjusterKind::Constant => "constant",
            AdjusterKind::Variance => "variance",
            AdjusterKind::Dgsa => "dgsa",
        };
        let optimizer = match self.train_optimizer {
            Optimizer::Sgd => "sgd",
            Optimizer::Adam => "adam",
        };
        let _ = writeln!(s, "steps = {}\nbeta_start = {}\nbeta_end = {}", self.steps, self.beta_start, self.beta_end);
        let _ = writeln!(s, "std_min = {}\nstd_max = {}\nstd_step = {}", self.std_min, self.std_max, self.std_step);
        let _ = writeln!(s, "tol = {}\nxi = {}\nn_guidance = {}", self.tol, self.xi, self.n_guidance);
        let _ = writeln!(s, "lambdas = {}\nstd_offsets = {}", join_list(&self.lambdas), join_list(&self.std_offsets));
        let _ = writeln!(s, "s_base = {}\nstd_rate = {}\nrefine_std = {}", self.s_base, self.std_rate, self.refine_std);
        let _ = writeln!(s, "use_table = {}\nrestorer = {restorer}\nnoise_power = {}", self.use_table, self.noise_power);
        let _ = writeln!(s, "adjuster = {adjuster}\nadjuster_scale = {}", self.adjuster_scale);
        let _ = writeln!(s, "variance_window = {}\nvariance_pivot = {}", self.variance_window, self.variance_pivot);
        let _ = writeln!(s, "denoiser = gmm\ngmm_components = {}\ngmm_em_iters = {}", self.gmm_components, self.gmm_em_iters);
        let _ = writeln!(s, "corpus_size = {}\nimage_size = {}\ncorpus_seed = {}", self.corpus_size, self.image_size, self.corpus_seed);
        if let Some(dir) = &self.corpus_dir {
            let _ = writeln!(s, "corpus_dir = {}", dir.display());
        }
        let _ = writeln!(s, "seed = {}\ntrain_stage1 = {}\ntrain_stage2 = {}", self.seed, self.train_stage1, self.train_stage2);
        let _ = writeln!(s, "train_optimizer = {optimizer}\ntrain_lr = {}\ntrain_momentum = {}", self.train_lr, self.train_momentum);
        let _ = writeln!(s, "train_holdout = {}\ntrain_validate_every = {}", self.train_holdout, self.train_validate_every);
        let _ = writeln!(s, "train_batch = {}\ngamma = {}\nsde_iters = {}", self.train_batch, join_list(&self.gamma), self.sde_iters);
        let _ = writeln!(s, "table_path = {}\nprior_dir = {}", self.table_path.display(), self.prior_dir.display());
        let _ = writeln!(s, "reference_path = {}\ndgsa_dir = {}\nsde_dir = {}", self.reference_path.display(), self.dgsa_dir.display(), self.sde_dir.display());
        s
    }
}
