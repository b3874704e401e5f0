use std::fs;
use std::path::Path;

use crate::error::{EstimationCode, Error, Result};
use crate::image::ImageBuf;
use crate::io::write_atomic;
use crate::scalar::{to_f64, Real};
use crate::spectral::{bin_frequency, mirror_extend, Fft2};

const POWER_FLOOR: f64 = 1e-30;

/// Radially averaged log power spectrum, one entry per frequency bin of width
/// `1 / (2·max(H, W))` cycles per sample, DC excluded.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialSpectrum {
    frequencies: Vec<f64>,
    log_power: Vec<f64>,
}

impl RadialSpectrum {
    pub fn new(frequencies: Vec<f64>, log_power: Vec<f64>) -> Result<Self> {
        if frequencies.len() != log_power.len() || frequencies.is_empty() {
            return Err(Error::Estimation {
                code: EstimationCode::SpectrumMismatch,
                reason: format!("{} frequencies for {} power values", frequencies.len(), log_power.len()),
            });
        }
        Ok(Self { frequencies, log_power })
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.frequencies
    }

    pub fn log_power(&self) -> &[f64] {
        &self.log_power
    }

    pub fn len(&self) -> usize {
        self.frequencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frequencies.is_empty()
    }

    /// Mean of the per-image log spectra over a clean corpus.
    pub fn reference<S: Real>(corpus: &[ImageBuf<S>]) -> Result<Self> {
        let first = corpus
            .first()
            .ok_or_else(|| Error::Config("reference spectrum needs a nonempty corpus".into()))?;
        let mut acc = radial_log_power(first)?;
        for img in &corpus[1..] {
            let s = radial_log_power(img)?;
            acc.check_compatible(&s)?;
            for (a, b) in acc.log_power.iter_mut().zip(&s.log_power) {
                *a += b;
            }
        }
        let n = corpus.len() as f64;
        acc.log_power.iter_mut().for_each(|v| *v /= n);
        Ok(acc)
    }

    pub fn check_compatible(&self, other: &Self) -> Result<()> {
        let same = self.len() == other.len()
            && self.frequencies.iter().zip(&other.frequencies).all(|(a, b)| (a - b).abs() < 1e-9);
        if same {
            Ok(())
        } else {
            Err(Error::Estimation {
                code: EstimationCode::SpectrumMismatch,
                reason: format!(
                    "spectra have {} and {} bins; the reference must be built at the input resolution",
                    self.len(),
                    other.len()
                ),
            })
        }
    }

    /// Mean log power over the bins whose frequency lies in `[lo, hi]`.
    pub fn band_mean(&self, lo: f64, hi: f64) -> f64 {
        let vals: Vec<f64> = self
            .frequencies
            .iter()
            .zip(&self.log_power)
            .filter(|(f, _)| **f >= lo && **f <= hi)
            .map(|(_, p)| *p)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = String::from("# frequency_bin\tlog_power\n");
        for (f, p) in self.frequencies.iter().zip(&self.log_power) {
            text.push_str(&format!("{f}\t{p}\n"));
        }
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut freqs, mut power) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(path, format!("line {}: expected 2 tab-separated fields", i + 1)));
            };
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| Error::format(path, format!("line {}: bad number `{s}`", i + 1)))
            };
            freqs.push(parse(a)?);
            power.push(parse(b)?);
        }
        Self::new(freqs, power).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Visits every non-DC cell of the mirrored `2h × 2w` FFT grid with its radial
/// bin index (1-based, up to `max(h, w)`) and signed frequencies.
fn for_each_cell(h: usize, w: usize, mut f: impl FnMut(usize, usize, usize)) {
    let (mh, mw) = (2 * h, 2 * w);
    let n_bins = h.max(w);
    let delta = 1.0 / (2 * n_bins) as f64;
    for ky in 0..mh {
        let fy = bin_frequency(ky, mh);
        for kx in 0..mw {
            let fx = bin_frequency(kx, mw);
            let b = ((fy * fy + fx * fx).sqrt() / delta).round() as usize;
            if b == 0 || b > n_bins {
                continue;
            }
            f(b, ky, kx);
        }
    }
}

/// Radially averaged power response `|T(fy)·T(fx)|²` of the separable kernel
/// with 1-D transfer `t1`, on the same bins as [`radial_log_power`].
pub(crate) fn radial_transfer_power(h: usize, w: usize, t1: impl Fn(f64) -> f64) -> Vec<f64> {
    let (mh, mw) = (2 * h, 2 * w);
    let ty: Vec<f64> = (0..mh).map(|k| t1(bin_frequency(k, mh))).collect();
    let tx: Vec<f64> = (0..mw).map(|k| t1(bin_frequency(k, mw))).collect();
    let n_bins = h.max(w);
    let mut sums = vec![0.0; n_bins + 1];
    let mut counts = vec![0usize; n_bins + 1];
    for_each_cell(h, w, |b, ky, kx| {
        let v = ty[ky] * tx[kx];
        sums[b] += v * v;
        counts[b] += 1;
    });
    (1..=n_bins).filter(|&b| counts[b] > 0).map(|b| sums[b] / counts[b] as f64).collect()
}

/// Radial log power spectrum of the mean-removed, mirror-extended image,
/// averaged over channels.
pub fn radial_log_power<S: Real>(img: &ImageBuf<S>) -> Result<RadialSpectrum> {
    let (h, w, c) = img.shape();
    let (mh, mw) = (2 * h, 2 * w);
    let n_bins = h.max(w);
    let delta = 1.0 / (2 * n_bins) as f64;
    let fft = Fft2::new(mh, mw);
    let mut sums = vec![0.0; n_bins + 1];
    let mut counts = vec![0usize; n_bins + 1];
    let mut total = 0.0;
    for ch in 0..c {
        let plane: Vec<f64> = img.channel(ch).as_slice().iter().map(|&v| to_f64(v)).collect();
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let centred: Vec<f64> = plane.iter().map(|v| v - mean).collect();
        total += centred.iter().map(|v| v * v).sum::<f64>();
        let mut spec = mirror_extend(&centred, h, w);
        fft.forward(&mut spec);
        let norm = (mh * mw) as f64;
        for_each_cell(h, w, |b, ky, kx| {
            sums[b] += spec[ky * mw + kx].norm_sqr() / norm;
            counts[b] += 1;
        });
    }
    if !(total > 1e-20) || !total.is_finite() {
        return Err(Error::Estimation {
            code: EstimationCode::DegenerateSpectrum,
            reason: "input has no variation to analyse".into(),
        });
    }
    let (mut freqs, mut power) = (Vec::new(), Vec::new());
    for b in 1..=n_bins {
        if counts[b] > 0 {
            freqs.push(b as f64 * delta);
            power.push((sums[b] / counts[b] as f64 + POWER_FLOOR).ln());
        }
    }
    RadialSpectrum::new(freqs, power)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{convolve, GaussianKernel};

    fn noise(n: usize, seed: u64) -> ImageBuf<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        ImageBuf::standard_normal(n, n, 1, &mut rng)
    }

    #[test]
    fn constant_image_is_degenerate() {
        let err = radial_log_power(&ImageBuf::<f64>::filled(8, 8, 1, 0.3)).unwrap_err();
        assert!(matches!(err, Error::Estimation { code: EstimationCode::DegenerateSpectrum, .. }));
    }

    #[test]
    fn bins_cover_up_to_nyquist() {
        let s = radial_log_power(&noise(16, 1)).unwrap();
        assert_eq!(s.len(), 16);
        assert!((s.frequencies()[0] - 1.0 / 32.0).abs() < 1e-15);
        assert!((s.frequencies()[15] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn blur_attenuates_high_frequencies() {
        let x = noise(32, 2);
        let y = convolve(&x, &GaussianKernel::new(2.0).unwrap());
        let (sx, sy) = (radial_log_power(&x).unwrap(), radial_log_power(&y).unwrap());
        let drop_low = sx.band_mean(0.0, 0.05) - sy.band_mean(0.0, 0.05);
        let drop_high = sx.band_mean(0.3, 0.5) - sy.band_mean(0.3, 0.5);
        assert!(drop_high > drop_low + 5.0);
    }

    #[test]
    fn text_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.tsv");
        let s = RadialSpectrum::reference(&[noise(8, 3), noise(8, 4)]).unwrap();
        s.save(&path).unwrap();
        assert_eq!(RadialSpectrum::load(&path).unwrap(), s);
    }

    #[test]
    fn mismatched_resolution_detected() {
        let a = radial_log_power(&noise(8, 5)).unwrap();
        let b = radial_log_power(&noise(16, 5)).unwrap();
        assert!(matches!(
            a.check_compatible(&b),
            Err(Error::Estimation { code: EstimationCode::SpectrumMismatch, .. })
        ));
    }
}
