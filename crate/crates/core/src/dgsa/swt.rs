//! One-level stationary (undecimated) Haar transform.
//!
//! Along one axis the analysis pair is `lo[n] = (x[n] + x[n+1]) / 2` and
//! `hi[n] = (x[n] - x[n+1]) / 2`, with the half-sample reflect boundary
//! `x[N] = x[N-1]`, so `lo + hi = x` exactly and the four bands sum back to the
//! input. Band names give the filter along x (columns) first, then along y
//! (rows): `lh` is smooth horizontally and differentiated vertically, so it
//! carries horizontal edges; `hl` carries vertical edges.

use crate::error::Result;
use crate::image::ImageBuf;
use crate::scalar::{lit, Real};

#[derive(Clone, Debug, PartialEq)]
pub struct SwtBands<S> {
    pub ll: ImageBuf<S>,
    pub lh: ImageBuf<S>,
    pub hl: ImageBuf<S>,
    pub hh: ImageBuf<S>,
}

impl<S: Real> SwtBands<S> {
    /// Bands in the order LL, LH, HL, HH.
    pub fn bands(&self) -> [&ImageBuf<S>; 4] {
        [&self.ll, &self.lh, &self.hl, &self.hh]
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Axis {
    X,
    Y,
}

fn next_along<S: Real>(img: &ImageBuf<S>, y: usize, x: usize, c: usize, axis: Axis) -> S {
    match axis {
        Axis::X => img.at(y, (x + 1).min(img.width() - 1), c),
        Axis::Y => img.at((y + 1).min(img.height() - 1), x, c),
    }
}

fn split<S: Real>(img: &ImageBuf<S>, axis: Axis) -> (ImageBuf<S>, ImageBuf<S>) {
    let half = lit::<S>(0.5);
    let (h, w, c) = img.shape();
    let lo = ImageBuf::from_fn(h, w, c, |y, x, ch| half * (img.at(y, x, ch) + next_along(img, y, x, ch, axis)));
    let hi = ImageBuf::from_fn(h, w, c, |y, x, ch| half * (img.at(y, x, ch) - next_along(img, y, x, ch, axis)));
    (lo, hi)
}

/// Adjoint of [`split`]: `Lᵀ lo + Hᵀ hi`.
fn split_adjoint<S: Real>(lo: &ImageBuf<S>, hi: &ImageBuf<S>, axis: Axis) -> ImageBuf<S> {
    let half = lit::<S>(0.5);
    let (h, w, c) = lo.shape();
    let mut out = ImageBuf::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let (ny, nx) = match axis {
                Axis::X => (y, (x + 1).min(w - 1)),
                Axis::Y => ((y + 1).min(h - 1), x),
            };
            for ch in 0..c {
                let (l, d) = (lo.at(y, x, ch), hi.at(y, x, ch));
                let i = out.index(y, x, ch);
                out.as_mut_slice()[i] += half * (l + d);
                let j = out.index(ny, nx, ch);
                out.as_mut_slice()[j] += half * (l - d);
            }
        }
    }
    out
}

pub fn swt_decompose<S: Real>(img: &ImageBuf<S>) -> SwtBands<S> {
    let (lx, hx) = split(img, Axis::X);
    let (ll, lh) = split(&lx, Axis::Y);
    let (hl, hh) = split(&hx, Axis::Y);
    SwtBands { ll, lh, hl, hh }
}

pub fn swt_reconstruct<S: Real>(bands: &SwtBands<S>) -> Result<ImageBuf<S>> {
    bands.ll.add(&bands.lh)?.add(&bands.hl)?.add(&bands.hh)
}

/// Transpose of [`swt_decompose`], used to pull band-space gradients back.
pub fn swt_adjoint<S: Real>(bands: &SwtBands<S>) -> Result<ImageBuf<S>> {
    bands.ll.check_shape(&bands.lh)?;
    bands.ll.check_shape(&bands.hl)?;
    bands.ll.check_shape(&bands.hh)?;
    let lx = split_adjoint(&bands.ll, &bands.lh, Axis::Y);
    let hx = split_adjoint(&bands.hl, &bands.hh, Axis::Y);
    Ok(split_adjoint(&lx, &hx, Axis::X))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = ImageBuf::<f64>::standard_normal(7, 9, 2, &mut rng);
        let back = swt_reconstruct(&swt_decompose(&img)).unwrap();
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_has_no_detail() {
        let b = swt_decompose(&ImageBuf::<f64>::filled(5, 6, 1, 0.7));
        for band in [&b.lh, &b.hl, &b.hh] {
            assert!(band.as_slice().iter().all(|&v| v == 0.0));
        }
        assert!(b.ll.as_slice().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn horizontal_step_lands_in_lh() {
        // rows 0..4 are 0, rows 4..8 are 1: only the row-3/row-4 pair differs
        let img = ImageBuf::<f64>::from_fn(8, 8, 1, |y, _, _| if y >= 4 { 1.0 } else { 0.0 });
        let b = swt_decompose(&img);
        assert!(b.hl.as_slice().iter().all(|&v| v == 0.0));
        assert!(b.hh.as_slice().iter().all(|&v| v == 0.0));
        for y in 0..8 {
            for x in 0..8 {
                let expected = if y == 3 { -0.5 } else { 0.0 };
                assert_eq!(b.lh.at(y, x, 0), expected);
            }
        }
    }

    #[test]
    fn linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = ImageBuf::<f64>::standard_normal(6, 5, 1, &mut rng);
        let b = ImageBuf::<f64>::standard_normal(6, 5, 1, &mut rng);
        let lhs = swt_decompose(&a.scale(2.0).add(&b).unwrap());
        let (da, db) = (swt_decompose(&a), swt_decompose(&b));
        for (l, (x, y)) in lhs.bands().iter().zip(da.bands().iter().zip(db.bands())) {
            for i in 0..l.len() {
                assert!((l.as_slice()[i] - 2.0 * x.as_slice()[i] - y.as_slice()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_matches_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = ImageBuf::<f64>::standard_normal(5, 7, 2, &mut rng);
        let u = SwtBands {
            ll: ImageBuf::standard_normal(5, 7, 2, &mut rng),
            lh: ImageBuf::standard_normal(5, 7, 2, &mut rng),
            hl: ImageBuf::standard_normal(5, 7, 2, &mut rng),
            hh: ImageBuf::standard_normal(5, 7, 2, &mut rng),
        };
        let fx = swt_decompose(&x);
        let lhs: f64 = fx.bands().iter().zip(u.bands()).map(|(a, b)| a.dot(b).unwrap()).sum();
        let rhs = x.dot(&swt_adjoint(&u).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }
}
