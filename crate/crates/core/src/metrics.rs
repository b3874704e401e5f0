//! Full-reference and no-reference image quality measures on unit-range images.

use crate::error::Result;
use crate::image::ImageBuf;
use crate::scalar::{to_f64, Real};

/// Peak signal-to-noise ratio in dB for unit peak; `f64::INFINITY` for identical images.
pub fn psnr<S: Real>(a: &ImageBuf<S>, b: &ImageBuf<S>) -> Result<f64> {
    let mse = mse(a, b)?;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

pub fn mse<S: Real>(a: &ImageBuf<S>, b: &ImageBuf<S>) -> Result<f64> {
    a.check_shape(b)?;
    Ok(a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| to_f64(x - y).powi(2)).sum::<f64>() / a.len() as f64)
}

/// Mean SSIM over every full `window × window` patch (uniform weights,
/// population statistics, `k1 = 0.01`, `k2 = 0.03`, unit data range),
/// averaged over channels.
pub fn ssim<S: Real>(a: &ImageBuf<S>, b: &ImageBuf<S>, window: usize) -> Result<f64> {
    a.check_shape(b)?;
    let (h, w, c) = a.shape();
    let win = window.min(h).min(w).max(1);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for y0 in 0..=h - win {
            for x0 in 0..=w - win {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + win {
                    for x in x0..x0 + win {
                        let (u, v) = (to_f64(a.at(y, x, ch)), to_f64(b.at(y, x, ch)));
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = saa / n - ma * ma;
                let vb = sbb / n - mb * mb;
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// No-reference sharpness: mean forward-difference gradient magnitude.
pub fn sharpness<S: Real>(img: &ImageBuf<S>) -> f64 {
    let (h, w, c) = img.shape();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = to_f64(img.at(y, x, ch));
                let gx = if x + 1 < w { to_f64(img.at(y, x + 1, ch)) - v } else { 0.0 };
                let gy = if y + 1 < h { to_f64(img.at(y + 1, x, ch)) - v } else { 0.0 };
                total += (gx * gx + gy * gy).sqrt();
            }
        }
    }
    total / img.len() as f64
}

/// PSNR, SSIM and measurement consistency of one result.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub consistency: f64,
}
