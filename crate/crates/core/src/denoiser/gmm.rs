//! Closed-form posterior denoiser for an isotropic Gaussian-mixture image prior.
//!
//! Under `x_t = sqrt(ab) x0 + sqrt(1 - ab) e` with `x0 ~ Σ w_k N(μ_k, v_k I)`,
//! component `k` explains `x_t` with variance `s_k = ab v_k + 1 - ab` and
//! conditional mean `m_k = μ_k + (sqrt(ab) v_k / s_k)(x_t - sqrt(ab) μ_k)`.
//! The posterior mean is `Σ r_k m_k` with softmax responsibilities `r_k`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Denoiser, EpsModel};
use crate::error::{Error, Result};
use crate::image::{format_shape, ImageBuf};
use crate::io::{read_tensor, write_tensor};
use crate::scalar::{from_usize, lit, to_f64, Real};
use crate::schedule::DiffusionSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct GmmComponent<S> {
    pub weight: S,
    pub mean: ImageBuf<S>,
    pub var: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GmmPrior<S> {
    components: Vec<GmmComponent<S>>,
}

impl<S: Real> GmmPrior<S> {
    pub fn new(components: Vec<GmmComponent<S>>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::Config("mixture prior has no components".into()))?;
        let shape = first.mean.shape();
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.shape() != shape {
                return Err(Error::Dimension {
                    expected: format_shape(shape),
                    got: format!("component {i} mean {}", format_shape(c.mean.shape())),
                });
            }
            if !(to_f64(c.weight) > 0.0) {
                return Err(Error::param("weight", format!("component {i} weight {} not positive", c.weight)));
            }
            if !(to_f64(c.var) > 0.0) {
                return Err(Error::param("var", format!("component {i} variance {} not positive", c.var)));
            }
            total += to_f64(c.weight);
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::param("weight", format!("weights sum to {total}, expected 1")));
        }
        // renormalize so the sum is 1 to working precision
        let total_s: S = components.iter().map(|c| c.weight).sum();
        let components = components
            .into_iter()
            .map(|c| GmmComponent { weight: c.weight / total_s, ..c })
            .collect();
        Ok(Self { components })
    }

    /// Equal-weight mixture with one component per image.
    pub fn from_images(images: &[ImageBuf<S>], var: S) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("mixture prior has no components".into()));
        }
        let w = S::one() / from_usize(images.len());
        Self::new(images.iter().map(|m| GmmComponent { weight: w, mean: m.clone(), var }).collect())
    }

    /// Fits `k` isotropic components with k-means++ seeding, Lloyd refinement and EM.
    pub fn fit(images: &[ImageBuf<S>], k: usize, em_iters: usize, seed: u64) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Config("cannot fit a mixture to an empty corpus".into()));
        }
        if k == 0 || k > images.len() {
            return Err(Error::param("k", format!("{k} components for {} images", images.len())));
        }
        let shape = images[0].shape();
        for img in images {
            if img.shape() != shape {
                return Err(Error::Dimension { expected: format_shape(shape), got: format_shape(img.shape()) });
            }
        }
        let n = images.len();
        let dim = images[0].len();
        let dist = |a: &ImageBuf<S>, b: &ImageBuf<S>| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| to_f64((x - y) * (x - y))).sum()
        };

        // k-means++ seeding
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means = vec![images[rng.random_range(0..n)].clone()];
        let mut nearest: Vec<f64> = images.iter().map(|x| dist(x, &means[0])).collect();
        while means.len() < k {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, &d) in nearest.iter().enumerate() {
                    if u < d {
                        idx = i;
                        break;
                    }
                    u -= d;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            means.push(images[pick].clone());
            for (d, x) in nearest.iter_mut().zip(images) {
                *d = d.min(dist(x, means.last().unwrap()));
            }
        }

        // Lloyd iterations
        let mut assign = vec![0usize; n];
        for _ in 0..50 {
            let mut changed = false;
            for (i, x) in images.iter().enumerate() {
                let best = (0..k)
                    .min_by(|&a, &b| dist(x, &means[a]).total_cmp(&dist(x, &means[b])))
                    .unwrap();
                if best != assign[i] {
                    assign[i] = best;
                    changed = true;
                }
            }
            for (j, mean) in means.iter_mut().enumerate() {
                let members: Vec<&ImageBuf<S>> =
                    images.iter().zip(&assign).filter(|(_, &a)| a == j).map(|(x, _)| x).collect();
                if members.is_empty() {
                    continue;
                }
                let mut acc = ImageBuf::zeros_like(mean);
                for m in &members {
                    acc.axpy(S::one(), m)?;
                }
                *mean = acc.scale(S::one() / from_usize(members.len()));
            }
            if !changed {
                break;
            }
        }

        let floor = 1e-6;
        let mut weights = vec![1.0 / k as f64; k];
        let mut vars = vec![0.0; k];
        for j in 0..k {
            let (sum, cnt) = images
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == j)
                .fold((0.0, 0usize), |(s, c), (x, _)| (s + dist(x, &means[j]), c + 1));
            vars[j] = if cnt > 0 { (sum / (cnt * dim) as f64).max(floor) } else { floor.max(1e-2) };
            weights[j] = (cnt.max(1)) as f64;
        }
        let wsum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= wsum);

        // EM refinement with isotropic per-component variance
        for _ in 0..em_iters {
            let mut resp = vec![vec![0.0; k]; n];
            for (i, x) in images.iter().enumerate() {
                let logs: Vec<f64> = (0..k)
                    .map(|j| {
                        weights[j].ln()
                            - 0.5 * dim as f64 * (2.0 * std::f64::consts::PI * vars[j]).ln()
                            - dist(x, &means[j]) / (2.0 * vars[j])
                    })
                    .collect();
                let mx = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logs.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..k {
                    resp[i][j] = (logs[j] - mx).exp() / z;
                }
            }
            for j in 0..k {
                let nk: f64 = resp.iter().map(|r| r[j]).sum();
                if nk < 1e-8 {
                    continue;
                }
                let mut acc = ImageBuf::zeros_like(&means[j]);
                for (x, r) in images.iter().zip(&resp) {
                    acc.axpy(lit(r[j] / nk), x)?;
                }
                means[j] = acc;
                let ss: f64 = images.iter().zip(&resp).map(|(x, r)| r[j] * dist(x, &means[j])).sum();
                vars[j] = (ss / (nk * dim as f64)).max(floor);
                weights[j] = nk / n as f64;
            }
            let wsum: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= wsum);
        }

        Self::new(
            means
                .into_iter()
                .zip(weights.into_iter().zip(vars))
                .map(|(mean, (w, v))| GmmComponent { weight: lit(w), mean, var: lit(v) })
                .collect(),
        )
    }

    pub fn components(&self) -> &[GmmComponent<S>] {
        &self.components
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.components[0].mean.shape()
    }

    /// Mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> ImageBuf<S> {
        let mut acc = ImageBuf::zeros_like(&self.components[0].mean);
        for c in &self.components {
            acc.axpy(c.weight, &c.mean).expect("component shapes validated");
        }
        acc
    }

    /// Draws `x0` from the prior.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ImageBuf<S> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += to_f64(c.weight);
            if u < acc {
                chosen = c;
                break;
            }
        }
        let (h, w, ch) = chosen.mean.shape();
        let noise = ImageBuf::standard_normal(h, w, ch, rng);
        let sd = chosen.var.sqrt();
        chosen.mean.zip_map(&noise, |m, n| m + sd * n).expect("same shape")
    }

    /// Writes `manifest.tsv` (`weight<TAB>var<TAB>mean-file`) plus one tensor per mean.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::new();
        for (i, c) in self.components.iter().enumerate() {
            let file = format!("mean_{i:03}.bgt");
            write_tensor(&dir.join(&file), &c.mean)?;
            manifest.push_str(&format!("{}\t{}\t{}\n", to_f64(c.weight), to_f64(c.var), file));
        }
        let path = dir.join("manifest.tsv");
        crate::io::write_atomic(&path, manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.tsv");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut comps = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::format(&path, format!("line {}: expected 3 tab-separated fields", lineno + 1)));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::format(&path, format!("line {}: bad {what} `{s}`", lineno + 1)))
            };
            let weight = parse(fields[0], "weight")?;
            let var = parse(fields[1], "var")?;
            let mean = read_tensor::<S>(&dir.join(fields[2]))?;
            comps.push(GmmComponent { weight: lit(weight), mean, var: lit(var) });
        }
        Self::new(comps)
    }
}

/// Per-timestep quantities shared by the eps and vjp evaluations.
struct Posterior<S> {
    resp: Vec<S>,
    /// `sqrt(ab) v_k / s_k`
    gain: Vec<S>,
    /// conditional means `m_k`
    cond_means: Vec<ImageBuf<S>>,
    /// score directions `g_k = -(x_t - sqrt(ab) μ_k) / s_k`
    scores: Vec<ImageBuf<S>>,
    mean: ImageBuf<S>,
}

fn posterior<S: Real>(
    prior: &GmmPrior<S>,
    x_t: &ImageBuf<S>,
    t: usize,
    sched: &DiffusionSchedule<S>,
    with_scores: bool,
) -> Result<Posterior<S>> {
    sched.check_timestep(t)?;
    let first = &prior.components[0].mean;
    first.check_shape(x_t)?;
    let ab = sched.alpha_bar(t);
    let sab = ab.sqrt();
    let dim = from_usize::<S>(x_t.len());
    let half = lit::<S>(0.5);

    let k = prior.components.len();
    let mut logs = Vec::with_capacity(k);
    let mut gain = Vec::with_capacity(k);
    let mut cond_means = Vec::with_capacity(k);
    let mut scores = Vec::with_capacity(k);
    for c in &prior.components {
        let s = ab * c.var + (S::one() - ab);
        let diff = x_t.zip_map(&c.mean, |x, m| x - sab * m)?;
        let d2 = diff.sum_sq();
        logs.push(c.weight.ln() - half * dim * s.ln() - d2 / (lit::<S>(2.0) * s));
        let g = sab * c.var / s;
        gain.push(g);
        cond_means.push(c.mean.zip_map(&diff, |m, d| m + g * d)?);
        if with_scores {
            let inv = -S::one() / s;
            scores.push(diff.scale(inv));
        }
    }
    let mx = logs.iter().copied().fold(S::neg_infinity(), S::max);
    let z: S = logs.iter().map(|&l| (l - mx).exp()).sum();
    let resp: Vec<S> = logs.iter().map(|&l| (l - mx).exp() / z).collect();

    let mut mean = ImageBuf::zeros_like(x_t);
    for (r, m) in resp.iter().zip(&cond_means) {
        mean.axpy(*r, m)?;
    }
    Ok(Posterior { resp, gain, cond_means, scores, mean })
}

/// Posterior mean `E[x0 | x_t]` under the mixture prior.
pub fn gmm_posterior_mean<S: Real>(
    prior: &GmmPrior<S>,
    x_t: &ImageBuf<S>,
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<ImageBuf<S>> {
    Ok(posterior(prior, x_t, t, sched, false)?.mean)
}

/// Posterior-optimal noise prediction.
pub fn gmm_eps<S: Real>(
    prior: &GmmPrior<S>,
    x_t: &ImageBuf<S>,
    t: usize,
    sched: &DiffusionSchedule<S>,
) -> Result<ImageBuf<S>> {
    let post = posterior(prior, x_t, t, sched, false)?;
    let ab = sched.alpha_bar(t);
    let (sab, snab) = (ab.sqrt(), (S::one() - ab).sqrt());
    x_t.zip_map(&post.mean, |x, m| (x - sab * m) / snab)
}

/// Exact transpose-Jacobian product of [`gmm_eps`].
pub fn gmm_vjp<S: Real>(
    prior: &GmmPrior<S>,
    x_t: &ImageBuf<S>,
    t: usize,
    cotangent: &ImageBuf<S>,
    sched: &DiffusionSchedule<S>,
) -> Result<ImageBuf<S>> {
    x_t.check_shape(cotangent)?;
    let post = posterior(prior, x_t, t, sched, true)?;
    let ab = sched.alpha_bar(t);
    let (sab, snab) = (ab.sqrt(), (S::one() - ab).sqrt());

    // J_E^T u = Σ r_k c_k u + Σ r_k (m_k·u - Σ_j r_j m_j·u) g_k
    let iso: S = post.resp.iter().zip(&post.gain).map(|(&r, &g)| r * g).sum();
    let proj: Vec<S> = post
        .cond_means
        .iter()
        .map(|m| m.dot(cotangent))
        .collect::<Result<_>>()?;
    let avg: S = post.resp.iter().zip(&proj).map(|(&r, &p)| r * p).sum();
    let mut je = cotangent.scale(iso);
    for ((&r, &p), g) in post.resp.iter().zip(&proj).zip(&post.scores) {
        let coef = r * (p - avg);
        if coef != S::zero() {
            je.axpy(coef, g)?;
        }
    }
    cotangent.zip_map(&je, |u, j| (u - sab * j) / snab)
}

/// [`GmmPrior`] bound to a schedule, usable wherever a [`Denoiser`] is expected.
#[derive(Clone, Debug)]
pub struct GmmDenoiser<S> {
    prior: GmmPrior<S>,
    schedule: DiffusionSchedule<S>,
}

impl<S: Real> GmmDenoiser<S> {
    pub fn new(prior: GmmPrior<S>, schedule: DiffusionSchedule<S>) -> Self {
        Self { prior, schedule }
    }

    pub fn prior(&self) -> &GmmPrior<S> {
        &self.prior
    }

    pub fn schedule(&self) -> &DiffusionSchedule<S> {
        &self.schedule
    }

    pub fn posterior_mean(&self, x_t: &ImageBuf<S>, t: usize) -> Result<ImageBuf<S>> {
        gmm_posterior_mean(&self.prior, x_t, t, &self.schedule)
    }
}

impl<S: Real> EpsModel<S> for GmmDenoiser<S> {
    fn eps(&self, x_t: &ImageBuf<S>, t: usize) -> Result<ImageBuf<S>> {
        gmm_eps(&self.prior, x_t, t, &self.schedule)
    }
}

impl<S: Real> Denoiser<S> for GmmDenoiser<S> {
    fn vjp(&self, x_t: &ImageBuf<S>, t: usize, cotangent: &ImageBuf<S>) -> Result<ImageBuf<S>> {
        gmm_vjp(&self.prior, x_t, t, cotangent, &self.schedule)
    }
}
