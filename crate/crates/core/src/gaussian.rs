//! Discrete Gaussian kernels and separable reflect-boundary convolution.

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::scalar::{from_usize, lit, to_f64, Real};

/// Below this std the kernel degenerates to the discrete delta.
pub const DELTA_STD: f64 = 0.05;

/// Separable discrete Gaussian `taps[i] ∝ exp(-i² / 2σ²)`, `i ∈ [-radius, radius]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel<S> {
    std: S,
    radius: usize,
    taps: Vec<S>,
}

/// Support radius used for a given std: `max(1, ceil(3σ))`.
pub fn kernel_radius(std: f64) -> usize {
    ((3.0 * std).ceil() as usize).max(1)
}

impl<S: Real> GaussianKernel<S> {
    pub fn new(std: S) -> Result<Self> {
        let s = to_f64(std);
        if !(s >= 0.0) {
            return Err(Error::param("std", format!("{s} is negative or NaN")));
        }
        if s < DELTA_STD {
            return Ok(Self::delta_with_std(std));
        }
        Ok(Self::with_radius(std, kernel_radius(s)))
    }

    pub fn delta() -> Self {
        Self::delta_with_std(S::zero())
    }

    fn delta_with_std(std: S) -> Self {
        Self { std, radius: 1, taps: vec![S::zero(), S::one(), S::zero()] }
    }

    /// Gaussian profile on a caller-chosen support; `std` must be above the delta threshold.
    pub fn with_radius(std: S, radius: usize) -> Self {
        let radius = radius.max(1);
        let two_var = lit::<S>(2.0) * std * std;
        let raw: Vec<S> = (0..=2 * radius)
            .map(|j| {
                let i = from_usize::<S>(j) - from_usize::<S>(radius);
                (-(i * i) / two_var).exp()
            })
            .collect();
        let total: S = raw.iter().copied().sum();
        let taps = raw.into_iter().map(|v| v / total).collect();
        Self { std, radius, taps }
    }

    #[inline]
    pub fn std(&self) -> S {
        self.std
    }

    #[inline]
    pub fn radius(&self) -> usize {
        self.radius
    }

    #[inline]
    pub fn taps(&self) -> &[S] {
        &self.taps
    }

    pub fn is_delta(&self) -> bool {
        to_f64(self.std) < DELTA_STD
    }

    /// Frequency response of the 1-D profile at `freq` cycles per sample.
    pub fn transfer(&self, freq: f64) -> f64 {
        let r = self.radius as isize;
        self.taps
            .iter()
            .enumerate()
            .map(|(j, &w)| to_f64(w) * (2.0 * std::f64::consts::PI * freq * (j as isize - r) as f64).cos())
            .sum()
    }
}

/// `d taps / d std` for the kernel `GaussianKernel::new(std)` (fixed support).
pub fn kernel_std_derivative<S: Real>(std: S) -> Result<Vec<S>> {
    let s = to_f64(std);
    if !(s >= DELTA_STD) {
        return Err(Error::param(
            "std",
            format!("{s} is below the delta threshold {DELTA_STD}; derivative undefined"),
        ));
    }
    Ok(kernel_std_derivative_with_radius(std, kernel_radius(s)))
}

/// Derivative of the normalized profile on a fixed support.
pub fn kernel_std_derivative_with_radius<S: Real>(std: S, radius: usize) -> Vec<S> {
    let radius = radius.max(1);
    let two_var = lit::<S>(2.0) * std * std;
    let cube = std * std * std;
    let mut g = Vec::with_capacity(2 * radius + 1);
    let mut dg = Vec::with_capacity(2 * radius + 1);
    for j in 0..=2 * radius {
        let i = from_usize::<S>(j) - from_usize::<S>(radius);
        let v = (-(i * i) / two_var).exp();
        g.push(v);
        dg.push(v * i * i / cube);
    }
    let total: S = g.iter().copied().sum();
    let dtotal: S = dg.iter().copied().sum();
    let mut out: Vec<S> = g
        .iter()
        .zip(&dg)
        .map(|(&v, &dv)| (dv * total - v * dtotal) / (total * total))
        .collect();
    // Project onto the zero-sum constraint to remove rounding drift.
    let drift = out.iter().copied().sum::<S>() / from_usize(out.len());
    for v in &mut out {
        *v -= drift;
    }
    out
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
#[inline]
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Separable Gaussian blur: horizontal pass, then vertical pass.
pub fn convolve<S: Real>(img: &ImageBuf<S>, k: &GaussianKernel<S>) -> ImageBuf<S> {
    if k.is_delta() {
        return img.clone();
    }
    convolve_separable(img, k.taps(), k.taps())
}

/// Convolves with the outer product `col_taps ⊗ row_taps` (both odd length, centered).
pub fn convolve_separable<S: Real>(img: &ImageBuf<S>, row_taps: &[S], col_taps: &[S]) -> ImageBuf<S> {
    let horizontal = filter_rows(img, row_taps);
    filter_cols(&horizontal, col_taps)
}

fn filter_rows<S: Real>(img: &ImageBuf<S>, taps: &[S]) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let src = img.as_slice();
    let mut out = ImageBuf::zeros(h, w, c);
    let dst = out.as_mut_slice();
    let mut line = vec![S::zero(); w + 2 * r as usize];
    for y in 0..h {
        for ch in 0..c {
            for (j, slot) in line.iter_mut().enumerate() {
                let xi = reflect_index(j as isize - r, w);
                *slot = src[(y * w + xi) * c + ch];
            }
            for x in 0..w {
                let mut acc = S::zero();
                for (tap, &v) in taps.iter().zip(&line[x..x + taps.len()]) {
                    acc += *tap * v;
                }
                dst[(y * w + x) * c + ch] = acc;
            }
        }
    }
    out
}

fn filter_cols<S: Real>(img: &ImageBuf<S>, taps: &[S]) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let src = img.as_slice();
    let mut out = ImageBuf::zeros(h, w, c);
    let dst = out.as_mut_slice();
    let stride = w * c;
    for y in 0..h {
        let row = &mut dst[y * stride..(y + 1) * stride];
        for (j, &tap) in taps.iter().enumerate() {
            let yi = reflect_index(y as isize + j as isize - r, h);
            let srow = &src[yi * stride..(yi + 1) * stride];
            for (d, &s) in row.iter_mut().zip(srow) {
                *d += tap * s;
            }
        }
    }
    out
}

/// Transpose of [`convolve_separable`]: reflected samples scatter their
/// contributions back onto the pixels they were read from.
pub fn convolve_separable_adjoint<S: Real>(img: &ImageBuf<S>, row_taps: &[S], col_taps: &[S]) -> ImageBuf<S> {
    let cols = filter_cols_adjoint(img, col_taps);
    filter_rows_adjoint(&cols, row_taps)
}

fn filter_rows_adjoint<S: Real>(img: &ImageBuf<S>, taps: &[S]) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let src = img.as_slice();
    let mut out = ImageBuf::zeros(h, w, c);
    let dst = out.as_mut_slice();
    for y in 0..h {
        for x in 0..w {
            for (j, &tap) in taps.iter().enumerate() {
                let xi = reflect_index(x as isize + j as isize - r, w);
                for ch in 0..c {
                    dst[(y * w + xi) * c + ch] += tap * src[(y * w + x) * c + ch];
                }
            }
        }
    }
    out
}

fn filter_cols_adjoint<S: Real>(img: &ImageBuf<S>, taps: &[S]) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let r = (taps.len() / 2) as isize;
    let src = img.as_slice();
    let mut out = ImageBuf::zeros(h, w, c);
    let dst = out.as_mut_slice();
    let stride = w * c;
    for y in 0..h {
        let srow = &src[y * stride..(y + 1) * stride];
        for (j, &tap) in taps.iter().enumerate() {
            let yi = reflect_index(y as isize + j as isize - r, h);
            for (d, &s) in dst[yi * stride..(yi + 1) * stride].iter_mut().zip(srow) {
                *d += tap * s;
            }
        }
    }
    out
}

/// `∂(k_σ ⊗ img)/∂σ` via the separable product rule.
pub fn convolve_std_derivative<S: Real>(img: &ImageBuf<S>, k: &GaussianKernel<S>) -> Result<ImageBuf<S>> {
    if k.is_delta() {
        return Err(Error::param("std", "derivative undefined for the delta kernel"));
    }
    let dtaps = kernel_std_derivative_with_radius(k.std(), k.radius());
    let a = convolve_separable(img, &dtaps, k.taps());
    let b = convolve_separable(img, k.taps(), &dtaps);
    a.add(&b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(n: usize) -> ImageBuf<f64> {
        let mut img = ImageBuf::zeros(n, n, 1);
        img.set(n / 2, n / 2, 0, 1.0);
        img
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let k = GaussianKernel::<f64>::new(1.7).unwrap();
        let a = ImageBuf::from_fn(7, 9, 2, |y, x, c| ((y * 13 + x * 7 + c * 3) % 11) as f64 - 5.0);
        let b = ImageBuf::from_fn(7, 9, 2, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f64 * 0.3);
        let lhs = convolve(&a, &k).dot(&b).unwrap();
        let rhs = a.dot(&convolve_separable_adjoint(&b, k.taps(), k.taps())).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_std_is_identity() {
        let k = GaussianKernel::<f64>::new(0.0).unwrap();
        assert!(k.is_delta());
        assert_eq!(k.taps(), &[0.0, 1.0, 0.0]);
        let img = ImageBuf::from_fn(5, 6, 2, |y, x, c| (y * 7 + x * 3 + c) as f64);
        assert_eq!(convolve(&img, &k), img);
    }

    #[test]
    fn unit_std_center_tap() {
        let k = GaussianKernel::<f64>::new(1.0).unwrap();
        assert_eq!(k.radius(), 3);
        // normalization oracle: exp(-i²/2) for i = -3..=3
        let total: f64 = (-3i32..=3).map(|i| (-(i * i) as f64 / 2.0).exp()).sum();
        assert!((k.taps()[3] - 1.0 / total).abs() < 1e-15);
        let sum: f64 = k.taps().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn taps_symmetric_and_positive() {
        for std in [0.3, 1.0, 2.0, 4.7, 15.0] {
            let k = GaussianKernel::<f64>::new(std).unwrap();
            assert_eq!(k.radius(), kernel_radius(std));
            let mut rev = k.taps().to_vec();
            rev.reverse();
            assert_eq!(rev, k.taps());
            assert!(k.taps().iter().all(|&t| t > 0.0));
        }
    }

    #[test]
    fn negative_std_rejected() {
        assert!(matches!(GaussianKernel::<f64>::new(-0.1), Err(Error::Param { name: "std", .. })));
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = ImageBuf::<f64>::filled(7, 5, 1, 0.37);
        for std in [0.5, 2.0, 9.0] {
            let out = convolve(&img, &GaussianKernel::new(std).unwrap());
            assert!(out.as_slice().iter().all(|&v| (v - 0.37).abs() < 1e-14));
        }
    }

    #[test]
    fn centered_impulse_gives_outer_product() {
        let k = GaussianKernel::<f64>::new(1.0).unwrap();
        let out = convolve(&impulse(9), &k);
        // direct 2-D oracle: the impulse is far enough from the border
        for y in 0..9 {
            for x in 0..9 {
                let dy = y as isize - 4;
                let dx = x as isize - 4;
                let expected = if dy.abs() <= 3 && dx.abs() <= 3 {
                    k.taps()[(dy + 3) as usize] * k.taps()[(dx + 3) as usize]
                } else {
                    0.0
                };
                assert!((out.at(y, x, 0) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn reflect_matches_direct_mirror_sum() {
        // brute-force 2-D convolution with explicit mirrored extension
        let img = ImageBuf::<f64>::from_fn(6, 5, 1, |y, x, _| ((y * 5 + x) as f64 * 0.37).sin());
        let k = GaussianKernel::<f64>::new(2.5).unwrap();
        let out = convolve(&img, &k);
        let r = k.radius() as isize;
        for y in 0..6 {
            for x in 0..5 {
                let mut acc = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = reflect_index(y as isize + dy, 6);
                        let xx = reflect_index(x as isize + dx, 5);
                        acc += k.taps()[(dy + r) as usize] * k.taps()[(dx + r) as usize] * img.at(yy, xx, 0);
                    }
                }
                assert!((out.at(y, x, 0) - acc).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn reflect_index_folds() {
        let idx: Vec<usize> = (-5..9).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0, 0]);
    }

    #[test]
    fn derivative_sums_to_zero_and_is_symmetric() {
        for std in [0.05, 0.4, 1.0, 3.3] {
            let d = kernel_std_derivative::<f64>(std).unwrap();
            assert!(d.iter().sum::<f64>().abs() < 1e-12);
            let mut rev = d.clone();
            rev.reverse();
            for (a, b) in d.iter().zip(&rev) {
                assert!((a - b).abs() < 1e-15);
            }
        }
        assert!(kernel_std_derivative::<f64>(0.01).is_err());
    }

    #[test]
    fn derivative_matches_central_difference() {
        let h = 1e-4;
        let d = kernel_std_derivative::<f64>(1.0).unwrap();
        // the finite difference is taken on the same support (radius 3)
        let plus = GaussianKernel::with_radius(1.0 + h, 3);
        let minus = GaussianKernel::with_radius(1.0 - h, 3);
        for i in 0..7 {
            let fd = (plus.taps()[i] - minus.taps()[i]) / (2.0 * h);
            assert!((fd - d[i]).abs() < 1e-7, "tap {i}: fd {fd} analytic {}", d[i]);
        }
    }

    #[test]
    fn transfer_at_dc_is_one() {
        let k = GaussianKernel::<f64>::new(2.0).unwrap();
        assert!((k.transfer(0.0) - 1.0).abs() < 1e-12);
        assert!(k.transfer(0.25) < 1.0);
    }
}
