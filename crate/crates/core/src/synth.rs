//! Procedural "face-like" toy corpus and directory ingestion.
//!
//! Every image is drawn from one of a fixed family of archetypes (head and
//! facial features as hard-edged ellipses, striped hair and background
//! texture at 2.5–4 px periods, smooth shading). The corpus seed only picks
//! the archetype and small per-image perturbations, so a mixture prior fitted
//! to one corpus describes images from any other seed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::degrade::resize_bilinear;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::io::read_png;
use crate::scalar::{lit, Real};

/// Number of archetypes in the family.
pub const ARCHETYPES: usize = 8;
const FAMILY_SEED: u64 = 0x5EED_FACE;

#[derive(Clone, Debug)]
struct Archetype {
    background: f64,
    bg_period: f64,
    bg_angle: f64,
    bg_amp: f64,
    head: (f64, f64, f64, f64),
    skin: f64,
    shade: (f64, f64),
    hair_line: f64,
    hair_period: f64,
    hair_angle: f64,
    hair_level: f64,
    hair_amp: f64,
    eye_sep: f64,
    eye_y: f64,
    eye_r: (f64, f64),
    mouth: (f64, f64, f64),
    dark: f64,
}

impl Archetype {
    fn new(index: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FAMILY_SEED ^ (index as u64).wrapping_mul(0x9E37_79B9));
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        Self {
            background: u(0.25, 0.75),
            bg_period: u(2.5, 4.0),
            bg_angle: u(0.0, std::f64::consts::PI),
            bg_amp: u(0.28, 0.36),
            head: (u(0.46, 0.54), u(0.52, 0.58), u(0.28, 0.36), u(0.34, 0.42)),
            skin: u(0.45, 0.8),
            shade: (u(-0.12, 0.12), u(-0.12, 0.12)),
            hair_line: u(0.3, 0.42),
            hair_period: u(2.5, 3.5),
            hair_angle: u(1.2, 1.9),
            hair_level: u(0.2, 0.6),
            hair_amp: u(0.3, 0.38),
            eye_sep: u(0.12, 0.17),
            eye_y: u(0.44, 0.52),
            eye_r: (u(0.05, 0.075), u(0.03, 0.05)),
            mouth: (u(0.68, 0.74), u(0.09, 0.14), u(0.025, 0.045)),
            dark: u(0.02, 0.2),
        }
    }

    fn render(&self, size: usize, jitter: &Jitter) -> Vec<f64> {
        let n = size as f64;
        let inside = |u: f64, v: f64, cx: f64, cy: f64, rx: f64, ry: f64| {
            let (a, b) = ((u - cx) / rx, (v - cy) / ry);
            a * a + b * b <= 1.0
        };
        let stripe = |px: f64, py: f64, period: f64, angle: f64| {
            let phase = (px * angle.cos() + py * angle.sin()) / period;
            (2.0 * std::f64::consts::PI * phase).sin()
        };
        let (cx, cy, rx, ry) = self.head;
        let mut out = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let (u, v) = (px / n, py / n);
                let mut val = if inside(u, v, cx, cy, rx, ry) {
                    if v < self.hair_line + 0.04 * (12.0 * u).sin() {
                        self.hair_level + self.hair_amp * stripe(px, py, self.hair_period, self.hair_angle)
                    } else {
                        let mut s = self.skin + self.shade.0 * (u - cx) + self.shade.1 * (v - cy);
                        let eye_l = inside(u, v, cx - self.eye_sep, self.eye_y, self.eye_r.0, self.eye_r.1);
                        let eye_r = inside(u, v, cx + self.eye_sep, self.eye_y, self.eye_r.0, self.eye_r.1);
                        let mouth = inside(u, v, cx, self.mouth.0, self.mouth.1, self.mouth.2);
                        if eye_l || eye_r || mouth {
                            s = self.dark;
                        }
                        s
                    }
                } else {
                    self.background + self.bg_amp * stripe(px, py, self.bg_period, self.bg_angle)
                };
                val += jitter.brightness + jitter.gradient.0 * (u - 0.5) + jitter.gradient.1 * (v - 0.5);
                out.push(val);
            }
        }
        out
    }
}

struct Jitter {
    brightness: f64,
    gradient: (f64, f64),
}

/// Std of the i.i.d. pixel noise added to every toy image.
pub const PIXEL_NOISE: f64 = 0.015;

/// One toy image; `seed` picks the archetype and the perturbations.
pub fn synth_image<S: Real>(size: usize, seed: u64) -> Result<ImageBuf<S>> {
    if ![16, 32, 64].contains(&size) {
        return Err(Error::param("size", format!("{size} not one of 16, 32, 64")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Archetype::new(rng.random_range(0..ARCHETYPES));
    let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let jitter = Jitter { brightness: u(-0.03, 0.03), gradient: (u(-0.04, 0.04), u(-0.04, 0.04)) };
    let plane = arch.render(size, &jitter);
    let data = plane
        .into_iter()
        .map(|v| {
            let n: f64 = rng.sample(StandardNormal);
            lit::<S>((v + PIXEL_NOISE * n).clamp(0.0, 1.0))
        })
        .collect();
    ImageBuf::new(size, size, 1, data)
}

/// Archetype index used for a given image seed.
pub fn archetype_of(seed: u64) -> usize {
    ChaCha8Rng::seed_from_u64(seed).random_range(0..ARCHETYPES)
}

/// Seed of the `index`-th image in a corpus.
pub fn image_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(index as u64)
}

/// `n` toy images of `size × size`, deterministic in `seed`.
pub fn synth_corpus<S: Real>(n: usize, size: usize, seed: u64) -> Result<Vec<ImageBuf<S>>> {
    if n == 0 {
        return Err(Error::param("n", "corpus must contain at least one image"));
    }
    (0..n).map(|i| synth_image(size, image_seed(seed, i))).collect()
}

/// Loads every PNG in `dir` (sorted by name) as grayscale, centre-cropped to a
/// square and resized to `size × size`.
pub fn ingest_dir<S: Real>(dir: &Path, size: usize) -> Result<Vec<ImageBuf<S>>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::format(dir, "no PNG files to ingest"));
    }
    let mut out = Vec::new();
    let mut bad = Vec::new();
    for p in &paths {
        match read_png::<S>(p) {
            Ok(img) => out.push(square_gray(&img, size)),
            Err(_) => bad.push(p.display().to_string()),
        }
    }
    if !bad.is_empty() {
        return Err(Error::format(dir, format!("unreadable images: {}", bad.join(", "))));
    }
    Ok(out)
}

fn square_gray<S: Real>(img: &ImageBuf<S>, size: usize) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let side = h.min(w);
    let (oy, ox) = ((h - side) / 2, (w - side) / 2);
    let inv = S::one() / lit::<S>(c as f64);
    let crop = ImageBuf::from_fn(side, side, 1, |y, x, _| {
        (0..c).map(|ch| img.at(y + oy, x + ox, ch)).sum::<S>() * inv
    });
    resize_bilinear(&crop, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{convolve, GaussianKernel};

    #[test]
    fn deterministic_per_seed() {
        let a: Vec<ImageBuf<f64>> = synth_corpus(6, 32, 9).unwrap();
        let b: Vec<ImageBuf<f64>> = synth_corpus(6, 32, 9).unwrap();
        assert_eq!(a, b);
        let c: Vec<ImageBuf<f64>> = synth_corpus(6, 32, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unit_range_and_sizes() {
        for size in [16, 32, 64] {
            let img: ImageBuf<f64> = synth_image(size, 3).unwrap();
            assert_eq!(img.shape(), (size, size, 1));
            assert!(img.min_value() >= 0.0 && img.max_value() <= 1.0);
        }
        assert!(synth_image::<f64>(20, 0).is_err());
        assert!(synth_corpus::<f64>(0, 32, 0).is_err());
    }

    #[test]
    fn blur_removes_variance() {
        let corpus: Vec<ImageBuf<f64>> = synth_corpus(32, 32, 1).unwrap();
        let k = GaussianKernel::new(4.0).unwrap();
        let mean: f64 = corpus.iter().map(|x| x.mean()).sum::<f64>() / 32.0;
        let m = |imgs: &[ImageBuf<f64>]| {
            imgs.iter().map(|x| x.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64).sum::<f64>()
                / imgs.len() as f64
        };
        let blurred: Vec<_> = corpus.iter().map(|x| convolve(x, &k)).collect();
        assert!(m(&corpus) > m(&blurred));
    }

    #[test]
    fn ingest_crops_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageBuf::<f64>::from_fn(20, 30, 3, |y, x, c| ((y + x + c) % 7) as f64 / 7.0);
        crate::io::write_png(&dir.path().join("a.png"), &img).unwrap();
        let out: Vec<ImageBuf<f64>> = ingest_dir(dir.path(), 16).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].shape(), (16, 16, 1));
        fs::write(dir.path().join("b.png"), b"not a png").unwrap();
        let err = ingest_dir::<f64>(dir.path(), 16).unwrap_err();
        assert!(err.to_string().contains("b.png"));
    }
}
