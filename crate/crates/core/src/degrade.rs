//! Synthetic degradation: blur, bilinear down-sampling, noise, block-DCT
//! quantization, and bilinear up-sampling back to the input size.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{convolve, reflect_index, GaussianKernel};
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DegradationParams {
    /// Blur std in pixels, `[0.1, 15]`.
    pub sigma: f64,
    /// Down/up-sampling factor, `[0.8, 32]`.
    pub scale: f64,
    /// Noise std on the 0–255 scale, `[0, 20]`.
    pub zeta: f64,
    /// Compression quality, `[30, 100]`; 100 disables quantization.
    pub quality: u32,
}

impl DegradationParams {
    pub fn new(sigma: f64, scale: f64, zeta: f64, quality: u32) -> Result<Self> {
        let p = Self { sigma, scale, zeta, quality };
        p.validate()?;
        Ok(p)
    }

    /// Blur only (`C = 1`, no noise, no quantization).
    pub fn blur_only(sigma: f64) -> Result<Self> {
        Self::new(sigma, 1.0, 0.0, 100)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &'static str, v: f64, lo: f64, hi: f64| {
            if (lo..=hi).contains(&v) {
                Ok(())
            } else {
                Err(Error::param(name, format!("{v} outside [{lo}, {hi}]")))
            }
        };
        check("sigma", self.sigma, 0.1, 15.0)?;
        check("scale", self.scale, 0.8, 32.0)?;
        check("zeta", self.zeta, 0.0, 20.0)?;
        check("quality", self.quality as f64, 30.0, 100.0)
    }

    /// Uniform quantizer step applied to orthonormal 8×8 DCT coefficients.
    pub fn quant_step(&self) -> f64 {
        (100.0 - self.quality as f64) / 100.0 * 0.25
    }
}

/// Applies the full degradation chain; deterministic in `seed`.
pub fn degrade<S: Real>(x: &ImageBuf<S>, p: &DegradationParams, seed: u64) -> Result<ImageBuf<S>> {
    p.validate()?;
    let (h, w, _) = x.shape();
    let blurred = convolve(x, &GaussianKernel::new(lit::<S>(p.sigma))?);
    let lh = ((h as f64 / p.scale).round() as usize).max(1);
    let lw = ((w as f64 / p.scale).round() as usize).max(1);
    let mut low = resize_bilinear(&blurred, lh, lw);
    if p.zeta > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, c) = low.shape();
        let noise = ImageBuf::<S>::standard_normal(a, b, c, &mut rng);
        low.axpy(lit(p.zeta / 255.0), &noise)?;
    }
    if p.quality < 100 {
        low = block_dct_quantize(&low, p.quant_step());
    }
    Ok(resize_bilinear(&low, h, w))
}

/// Bilinear resampling with half-pixel-centred sample positions and edge clamping.
/// Resizing to the same shape returns an exact copy.
pub fn resize_bilinear<S: Real>(img: &ImageBuf<S>, out_h: usize, out_w: usize) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    if (h, w) == (out_h, out_w) {
        return img.clone();
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * ratio - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = axis(h, out_h);
    let xs = axis(w, out_w);
    ImageBuf::from_fn(out_h, out_w, c, |oy, ox, ch| {
        let (y0, y1, fy) = ys[oy];
        let (x0, x1, fx) = xs[ox];
        let v = |y, x| to_f64(img.at(y, x, ch));
        let top = v(y0, x0) * (1.0 - fx) + v(y0, x1) * fx;
        let bot = v(y1, x0) * (1.0 - fx) + v(y1, x1) * fx;
        lit(top * (1.0 - fy) + bot * fy)
    })
}

fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (k, row) in m.iter_mut().enumerate() {
        let scale = if k == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (n, v) in row.iter_mut().enumerate() {
            *v = scale * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / 16.0).cos();
        }
    }
    m
}

/// Quantizes each channel's 8×8 orthonormal DCT coefficients to multiples of
/// `step`. Partial border blocks are filled by reflection before the transform.
pub fn block_dct_quantize<S: Real>(img: &ImageBuf<S>, step: f64) -> ImageBuf<S> {
    if step <= 0.0 {
        return img.clone();
    }
    let (h, w, c) = img.shape();
    let d = dct_matrix();
    let mut out = img.clone();
    let mut block = [[0.0f64; 8]; 8];
    let mut tmp = [[0.0f64; 8]; 8];
    for ch in 0..c {
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                for (i, row) in block.iter_mut().enumerate() {
                    for (j, v) in row.iter_mut().enumerate() {
                        let y = reflect_index((by + i) as isize, h);
                        let x = reflect_index((bx + j) as isize, w);
                        *v = to_f64(img.at(y, x, ch));
                    }
                }
                // coefficients = D B D^T
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| d[i][k] * block[k][j]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let coef: f64 = (0..8).map(|k| tmp[i][k] * d[j][k]).sum();
                        block[i][j] = (coef / step).round() * step;
                    }
                }
                // inverse: D^T Q D
                for i in 0..8 {
                    for j in 0..8 {
                        tmp[i][j] = (0..8).map(|k| d[k][i] * block[k][j]).sum();
                    }
                }
                for i in 0..8 {
                    for j in 0..8 {
                        let (y, x) = (by + i, bx + j);
                        if y < h && x < w {
                            let v: f64 = (0..8).map(|k| tmp[i][k] * d[k][j]).sum();
                            out.set(y, x, ch, lit(v));
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smooth(n: usize) -> ImageBuf<f64> {
        ImageBuf::from_fn(n, n, 1, |y, x, _| 0.5 + 0.3 * ((y as f64) / 5.0).sin() * ((x as f64) / 7.0).cos())
    }

    #[test]
    fn range_checks_name_the_field() {
        assert!(matches!(DegradationParams::new(20.0, 1.0, 0.0, 100), Err(Error::Param { name: "sigma", .. })));
        assert!(matches!(DegradationParams::new(1.0, 0.5, 0.0, 100), Err(Error::Param { name: "scale", .. })));
        assert!(matches!(DegradationParams::new(1.0, 1.0, 21.0, 100), Err(Error::Param { name: "zeta", .. })));
        assert!(matches!(DegradationParams::new(1.0, 1.0, 0.0, 29), Err(Error::Param { name: "quality", .. })));
    }

    #[test]
    fn neutral_params_equal_blur_only() {
        let x = smooth(32);
        let p = DegradationParams::new(0.1, 1.0, 0.0, 100).unwrap();
        let y = degrade(&x, &p, 3).unwrap();
        assert_eq!(y, convolve(&x, &GaussianKernel::new(0.1).unwrap()));
    }

    #[test]
    fn noise_level_matches_zeta() {
        let x = ImageBuf::<f64>::filled(64, 64, 1, 0.5);
        let p = DegradationParams::new(0.1, 1.0, 20.0, 100).unwrap();
        let y = degrade(&x, &p, 11).unwrap();
        let r = y.map(|v| v - 0.5);
        let sd = (r.sum_sq() / r.len() as f64 - r.mean().powi(2)).sqrt();
        assert!((sd / (20.0 / 255.0) - 1.0).abs() < 0.05, "sd {sd}");
    }

    #[test]
    fn seeded_determinism() {
        let x = smooth(24);
        let p = DegradationParams::new(2.0, 2.0, 5.0, 80).unwrap();
        assert_eq!(degrade(&x, &p, 7).unwrap(), degrade(&x, &p, 7).unwrap());
        assert_ne!(degrade(&x, &p, 7).unwrap(), degrade(&x, &p, 8).unwrap());
    }

    #[test]
    fn quantizer_keeps_constant_blocks_close() {
        let x = ImageBuf::<f64>::filled(12, 12, 1, 0.5);
        let q = block_dct_quantize(&x, 0.05);
        // DC coefficient 4.0 is a multiple of 0.05
        for v in q.as_slice() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn quantizer_error_bounded_by_step() {
        let x = smooth(16);
        let step = 0.1;
        let q = block_dct_quantize(&x, step);
        // orthonormal transform: per-block L2 error ≤ 8 · step / 2
        let err = q.sub(&x).unwrap();
        assert!(err.sum_sq().sqrt() <= 4.0 * (step / 2.0) * 8.0);
        assert!(err.sum_sq() > 0.0);
    }

    #[test]
    fn resize_round_trip_of_constant() {
        let x = ImageBuf::<f64>::filled(10, 14, 2, 0.25);
        let small = resize_bilinear(&x, 5, 7);
        let back = resize_bilinear(&small, 10, 14);
        assert!(back.as_slice().iter().all(|v| (v - 0.25).abs() < 1e-15));
        assert_eq!(resize_bilinear(&x, 10, 14), x);
    }

    #[test]
    fn resize_exact_on_linear_ramp_interior() {
        // a linear ramp is reproduced exactly by bilinear interpolation away from the edges
        let x = ImageBuf::<f64>::from_fn(8, 8, 1, |_, c, _| c as f64);
        let up = resize_bilinear(&x, 8, 16);
        for c in 1..15 {
            let expected = (c as f64 + 0.5) / 2.0 - 0.5;
            assert!((up.at(3, c, 0) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn neutral_params_change_psnr_by_a_bounded_amount() {
        // off-centre taps at std 0.1 are exp(-50) and vanish against the centre tap,
        // so the neutral chain reproduces the input exactly
        let x = smooth(32);
        let y = degrade(&x, &DegradationParams::new(0.1, 1.0, 0.0, 100).unwrap(), 0).unwrap();
        let mse = y.sub(&x).unwrap().sum_sq() / x.len() as f64;
        assert!(mse < 1e-20, "mse {mse}");
        let y = degrade(&x, &DegradationParams::new(0.1, 1.0, 0.0, 95).unwrap(), 0).unwrap();
        let psnr = -10.0 * (y.sub(&x).unwrap().sum_sq() / x.len() as f64).log10();
        assert!(psnr.is_finite() && psnr > 40.0, "psnr {psnr}");
    }
}
