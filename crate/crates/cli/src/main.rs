use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

use guided_deblur::ablation::{self, AblationContext};
use guided_deblur::config::{AdjusterKind, RunConfig};
use guided_deblur::dblm::{dblm_map, train_sde, IdentityRestorer, RadialSpectrum, Restorer, SdeConfig, SdeRegressor, SpectralEstimator, WienerRestorer};
use guided_deblur::degrade::{degrade, DegradationParams};
use guided_deblur::denoiser::{GmmDenoiser, GmmPrior};
use guided_deblur::dgsa::{train_dgsa, ConstantAdjuster, DgsaNet, ScaleAdjuster, TrainContext, VarianceAdjuster};
use guided_deblur::dsst::{build_table, DssTable};
use guided_deblur::gaussian::{convolve, GaussianKernel};
use guided_deblur::image::to_model_range;
use guided_deblur::io::{read_png, write_atomic, write_png};
use guided_deblur::metrics::{psnr, ssim};
use guided_deblur::pipeline::{Pipeline, RestorerKind};
use guided_deblur::synth::{ingest_dir, synth_corpus};
use guided_deblur::{Image, Schedule};

#[derive(Parser)]
#[command(name = "gdeblur", version, about = "Blind image restoration by guided diffusion sampling")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the toy training corpus as PNGs.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Blur, resample, add noise and compress an image or a directory of PNGs.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        sigma: f64,
        #[arg(long, default_value_t = 2.0)]
        scale: f64,
        #[arg(long, default_value_t = 5.0)]
        zeta: f64,
        #[arg(long, default_value_t = 80)]
        quality: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the mixture prior used as the denoiser.
    FitPrior,
    /// Build the starting-step table and the reference spectrum from the corpus.
    BuildDsst,
    /// Print the estimated blur std of each input.
    EstimateStd {
        #[arg(long = "in")]
        input: PathBuf,
        /// Use the trained regressor in the configured directory.
        #[arg(long)]
        learned: bool,
    },
    /// Restore an image or a directory of PNGs.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        n_guidance: Option<usize>,
        /// Write per-step diagnostics next to each output (`<name>.trace.tsv`).
        #[arg(long)]
        trace: bool,
    },
    /// Train the guidance-scale network.
    TrainDgsa,
    /// Train the learned std regressor.
    TrainSde,
    /// PSNR and SSIM of restored images against clean ones, matched by file name.
    Eval {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        restored: PathBuf,
        /// Degraded inputs, to also report measurement consistency.
        #[arg(long)]
        degraded: Option<PathBuf>,
        /// Write the table as CSV here instead of stdout.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the component ablation and write a CSV.
    Ablate {
        #[arg(long, default_value = "components")]
        suite: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        n: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => {
            let cfg = RunConfig::parse("", Path::new(""))?;
            cfg.validate()?;
            cfg
        }
    };
    let env = Env { cfg };
    match cli.command {
        Command::Synth { out, n, size, seed } => env.synth(&out, n, size, seed),
        Command::Degrade { input, out, sigma, scale, zeta, quality, seed } => {
            let params = DegradationParams::new(sigma, scale, zeta, quality)?;
            for_each_image(&input, &out, seed, |y, s| Ok(degrade(y, &params, s)?))
        }
        Command::FitPrior => env.fit_prior(),
        Command::BuildDsst => env.build_dsst(),
        Command::EstimateStd { input, learned } => env.estimate_std(&input, learned),
        Command::Restore { input, out, seed, n_guidance, trace } => env.restore(&input, &out, seed, n_guidance, trace),
        Command::TrainDgsa => env.train_dgsa(),
        Command::TrainSde => env.train_sde(),
        Command::Eval { clean, restored, degraded, csv } => env.eval(&clean, &restored, degraded.as_deref(), csv.as_deref()),
        Command::Ablate { suite, out, n } => {
            if suite != "components" {
                bail!("unknown ablation suite `{suite}` (available: components)");
            }
            env.ablate(&out, n)
        }
    }
}

/// PNG inputs: the file itself, or every PNG in a directory sorted by name.
fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
            .with_context(|| format!("reading {}", input.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        paths.sort();
        if paths.is_empty() {
            bail!("{}: no PNG files", input.display());
        }
        Ok(paths)
    } else {
        Ok(vec![input.to_path_buf()])
    }
}

/// Maps each input to an output path: same file name under `out` for a
/// directory input, `out` itself for a single file.
fn output_paths(input: &Path, out: &Path, inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        Ok(inputs.iter().map(|p| out.join(p.file_name().expect("listed files have names"))).collect())
    } else {
        Ok(vec![out.to_path_buf()])
    }
}

/// Runs `f` over the inputs in parallel; image `i` gets seed `seed + i`.
fn for_each_image(input: &Path, out: &Path, seed: u64, f: impl Fn(&Image, u64) -> Result<Image> + Sync) -> Result<()> {
    let inputs = list_inputs(input)?;
    let outputs = output_paths(input, out, &inputs)?;
    inputs.par_iter().zip(&outputs).enumerate().try_for_each(|(i, (src, dst))| {
        let y: Image = read_png(src)?;
        let x = f(&y, seed + i as u64).with_context(|| src.display().to_string())?;
        write_png(dst, &x)?;
        Ok(())
    })
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what} `{}`; run `gdeblur {producer}` first", path.display());
    }
    Ok(())
}

struct Env {
    cfg: RunConfig,
}

impl Env {
    fn corpus(&self) -> Result<Vec<Image>> {
        Ok(match &self.cfg.corpus_dir {
            Some(dir) => ingest_dir(dir, self.cfg.image_size)?,
            None => synth_corpus(self.cfg.corpus_size, self.cfg.image_size, self.cfg.corpus_seed)?,
        })
    }

    fn schedule(&self) -> Result<Schedule> {
        Ok(self.cfg.schedule()?)
    }

    fn table(&self) -> Result<DssTable> {
        require(&self.cfg.table_path, "starting-step table", "build-dsst")?;
        Ok(DssTable::load(&self.cfg.table_path)?)
    }

    fn estimator(&self) -> Result<SpectralEstimator> {
        require(&self.cfg.reference_path, "reference spectrum", "build-dsst")?;
        let reference = RadialSpectrum::load(&self.cfg.reference_path)?;
        Ok(SpectralEstimator::new(reference, self.cfg.grid()?, self.cfg.noise_power))
    }

    fn denoiser(&self) -> Result<GmmDenoiser<f64>> {
        require(&self.cfg.prior_dir.join("manifest.tsv"), "mixture prior", "fit-prior")?;
        Ok(GmmDenoiser::new(GmmPrior::load(&self.cfg.prior_dir)?, self.schedule()?))
    }

    fn adjuster(&self) -> Result<Box<dyn ScaleAdjuster<f64>>> {
        Ok(match self.cfg.adjuster {
            AdjusterKind::Constant => Box::new(ConstantAdjuster::new(self.cfg.adjuster_scale)?),
            AdjusterKind::Variance => Box::new(VarianceAdjuster::new(self.cfg.variance_window, self.cfg.variance_pivot)?),
            AdjusterKind::Dgsa => Box::new(self.trained_net()?),
        })
    }

    fn trained_net(&self) -> Result<DgsaNet> {
        require(&self.cfg.dgsa_dir.join("manifest.tsv"), "trained adjuster", "train-dgsa")?;
        Ok(DgsaNet::load(&self.cfg.dgsa_dir)?)
    }

    fn synth(&self, out: &Path, n: Option<usize>, size: Option<usize>, seed: Option<u64>) -> Result<()> {
        let corpus: Vec<Image> = synth_corpus(
            n.unwrap_or(self.cfg.corpus_size),
            size.unwrap_or(self.cfg.image_size),
            seed.unwrap_or(self.cfg.corpus_seed),
        )?;
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        corpus.par_iter().enumerate().try_for_each(|(i, x)| write_png(&out.join(format!("{i:05}.png")), x))?;
        println!("wrote {} images to {}", corpus.len(), out.display());
        Ok(())
    }

    fn fit_prior(&self) -> Result<()> {
        let model: Vec<Image> = self.corpus()?.iter().map(to_model_range).collect();
        let prior = GmmPrior::fit(&model, self.cfg.gmm_components, self.cfg.gmm_em_iters, self.cfg.seed)?;
        prior.save(&self.cfg.prior_dir)?;
        println!("wrote {}-component prior to {}", prior.components().len(), self.cfg.prior_dir.display());
        Ok(())
    }

    fn build_dsst(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let table = build_table(&corpus, &self.cfg.grid()?, self.cfg.tol, &self.schedule()?)?;
        table.save(&self.cfg.table_path)?;
        RadialSpectrum::reference(&corpus)?.save(&self.cfg.reference_path)?;
        println!("wrote {} and {}", self.cfg.table_path.display(), self.cfg.reference_path.display());
        Ok(())
    }

    fn estimate_std(&self, input: &Path, learned: bool) -> Result<()> {
        let inputs = list_inputs(input)?;
        let sde = if learned {
            require(&self.cfg.sde_dir.join("manifest.tsv"), "trained std regressor", "train-sde")?;
            Some(SdeRegressor::load(&self.cfg.sde_dir, self.cfg.grid()?)?)
        } else {
            None
        };
        let est = self.estimator()?;
        println!("file\tstd");
        for p in inputs {
            let y: Image = read_png(&p)?;
            let std = match &sde {
                Some(net) => net.predict(&y)?,
                None => est.estimate(&y)?.std_hat,
            };
            println!("{}\t{std:.3}", p.display());
        }
        Ok(())
    }

    fn restore(&self, input: &Path, out: &Path, seed: Option<u64>, n_guidance: Option<usize>, trace: bool) -> Result<()> {
        let mut config = self.cfg.pipeline();
        if let Some(n) = n_guidance {
            config = config.with_guidance_count(n);
        }
        config.validate()?;
        let table = if config.use_table { Some(self.table()?) } else { None };
        let estimator = self.estimator()?;
        let denoiser = self.denoiser()?;
        let adjuster = self.adjuster()?;
        let schedule = self.schedule()?;
        let pipeline = Pipeline {
            schedule: &schedule,
            denoiser: &denoiser,
            estimator: &estimator,
            table: table.as_ref(),
            adjuster: adjuster.as_ref(),
            config,
        };
        let inputs = list_inputs(input)?;
        let outputs = output_paths(input, out, &inputs)?;
        let seed = seed.unwrap_or(self.cfg.seed);
        let lines: Vec<String> = inputs
            .par_iter()
            .zip(&outputs)
            .enumerate()
            .map(|(i, (src, dst))| -> Result<String> {
                let y: Image = read_png(src)?;
                let r = pipeline.restore(&y, seed + i as u64).with_context(|| src.display().to_string())?;
                write_png(dst, &r.output)?;
                if trace {
                    r.trace.save(&dst.with_extension("trace.tsv"))?;
                }
                Ok(format!("{}\t{:.3}\t{}\t{:.3e}", dst.display(), r.std_hat, r.t_starts[0], r.consistency()?))
            })
            .collect::<Result<_>>()?;
        println!("file\tstd_hat\tt_start\tconsistency");
        for l in lines {
            println!("{l}");
        }
        Ok(())
    }

    fn train_dgsa(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let schedule = self.schedule()?;
        let table = self.table()?;
        let estimator = self.estimator()?;
        let denoiser = self.denoiser()?;
        let ctx = TrainContext { denoiser: &denoiser, schedule: &schedule, table: &table, estimator: &estimator };
        let out = train_dgsa(&ctx, &corpus, &self.cfg.training())?;
        out.net.save(&self.cfg.dgsa_dir)?;
        write_atomic(&self.cfg.dgsa_dir.join("curve.tsv"), out.curve_text().as_bytes())?;
        if let Some(e) = out.diverged {
            bail!("{e}; last finite weights saved to {}", self.cfg.dgsa_dir.display());
        }
        println!("wrote {}", self.cfg.dgsa_dir.display());
        Ok(())
    }

    fn train_sde(&self) -> Result<()> {
        let corpus = self.corpus()?;
        let cfg = SdeConfig { iterations: self.cfg.sde_iters, seed: self.cfg.seed, ..SdeConfig::default() };
        let out = train_sde(&corpus, &self.cfg.grid()?, &cfg)?;
        out.regressor.save(&self.cfg.sde_dir)?;
        println!("validation mean absolute std error {:.3}", out.validation_mae);
        println!("wrote {}", self.cfg.sde_dir.display());
        Ok(())
    }

    /// Consistency of a restored image with the guidance measurement built
    /// from its degraded input.
    fn consistency(&self, est: &SpectralEstimator, y: &Image, out: &Image) -> Result<f64> {
        let e = est.estimate(y)?;
        let restored = match self.cfg.restorer {
            RestorerKind::Identity => IdentityRestorer.restore(y)?,
            RestorerKind::Wiener => WienerRestorer::new(e.std_hat, self.cfg.noise_power)?.restore(y)?,
        };
        let measurement = dblm_map(&restored, &IdentityRestorer, e.std_hat)?;
        let r = convolve(out, &GaussianKernel::new(e.std_hat)?).sub(&measurement)?;
        Ok(r.sum_sq() / r.len() as f64)
    }

    fn eval(&self, clean: &Path, restored: &Path, degraded: Option<&Path>, csv: Option<&Path>) -> Result<()> {
        let inputs = list_inputs(restored)?;
        let est = match degraded {
            Some(_) => Some(self.estimator()?),
            None => None,
        };
        let name = |p: &Path| p.file_name().expect("listed files have names").to_owned();
        let partner = |dir: &Path, p: &Path| if dir.is_dir() { dir.join(name(p)) } else { dir.to_path_buf() };
        let mut text = String::from("file,psnr,ssim,consistency\n");
        let (mut sp, mut ss, mut sc) = (0.0, 0.0, 0.0);
        for p in &inputs {
            let out: Image = read_png(p)?;
            let x: Image = read_png(&partner(clean, p))?;
            let c = match (degraded, &est) {
                (Some(dir), Some(est)) => self.consistency(est, &read_png(&partner(dir, p))?, &out)?,
                _ => f64::NAN,
            };
            let (p_db, s) = (psnr(&out, &x)?, ssim(&out, &x, 7)?);
            sp += p_db;
            ss += s;
            sc += c;
            text.push_str(&format!("{},{p_db:.4},{s:.4},{c:.6e}\n", name(p).to_string_lossy()));
        }
        let n = inputs.len() as f64;
        text.push_str(&format!("mean,{:.4},{:.4},{:.6e}\n", sp / n, ss / n, sc / n));
        match csv {
            Some(path) => write_atomic(path, text.as_bytes())?,
            None => print!("{text}"),
        }
        Ok(())
    }

    fn ablate(&self, out: &Path, n: usize) -> Result<()> {
        if n == 0 {
            bail!("--n must be at least 1");
        }
        let schedule = self.schedule()?;
        let table = self.table()?;
        let estimator = self.estimator()?;
        let denoiser = self.denoiser()?;
        let net = self.trained_net()?;
        let clean: Vec<Image> = synth_corpus(n, self.cfg.image_size, self.cfg.corpus_seed.wrapping_add(1_000_003))?;
        let params = DegradationParams::new(3.0, 2.0, 5.0, 80)?;
        let degraded = clean
            .iter()
            .enumerate()
            .map(|(i, x)| degrade(x, &params, self.cfg.seed + i as u64))
            .collect::<guided_deblur::Result<Vec<_>>>()?;
        let ctx = AblationContext {
            schedule: &schedule,
            denoiser: &denoiser,
            estimator: &estimator,
            table: &table,
            adjuster: &net,
            base: self.cfg.pipeline(),
            constant_scale: self.cfg.adjuster_scale,
        };
        let rows = ablation::SETTINGS
            .par_iter()
            .map(|&s| ablation::run_setting(&ctx, s, &clean, &degraded, self.cfg.seed))
            .collect::<guided_deblur::Result<Vec<_>>>()?;
        let csv = ablation::to_csv(&rows);
        write_atomic(out, csv.as_bytes())?;
        print!("{csv}");
        Ok(())
    }
}
