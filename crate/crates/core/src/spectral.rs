//! 2-D FFT helpers on half-sample mirrored planes.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Forward/inverse 2-D transforms for a fixed `rows × cols` grid.
pub(crate) struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    fn run(&self, data: &mut [Complex<f64>], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        for line in data.chunks_exact_mut(self.cols) {
            rows.process(line);
        }
        let mut col = vec![Complex::new(0.0, 0.0); self.rows];
        for x in 0..self.cols {
            for (y, v) in col.iter_mut().enumerate() {
                *v = data[y * self.cols + x];
            }
            cols.process(&mut col);
            for (y, v) in col.iter().enumerate() {
                data[y * self.cols + x] = *v;
            }
        }
    }

    pub fn forward(&self, data: &mut [Complex<f64>]) {
        self.run(data, &self.row_fwd.clone(), &self.col_fwd.clone());
    }

    /// Inverse transform including the `1 / (rows·cols)` normalization.
    pub fn inverse(&self, data: &mut [Complex<f64>]) {
        self.run(data, &self.row_inv.clone(), &self.col_inv.clone());
        let n = (self.rows * self.cols) as f64;
        for v in data.iter_mut() {
            *v /= n;
        }
    }
}

/// Mirrors an `h × w` plane to `2h × 2w` (half-sample symmetric), so circular
/// convolution on the result equals reflect-boundary convolution on the input.
pub(crate) fn mirror_extend(plane: &[f64], h: usize, w: usize) -> Vec<Complex<f64>> {
    let (mh, mw) = (2 * h, 2 * w);
    let mut out = Vec::with_capacity(mh * mw);
    for y in 0..mh {
        let sy = if y < h { y } else { mh - 1 - y };
        for x in 0..mw {
            let sx = if x < w { x } else { mw - 1 - x };
            out.push(Complex::new(plane[sy * w + sx], 0.0));
        }
    }
    out
}

/// Signed frequency in cycles per sample for FFT bin `k` of length `n`.
pub(crate) fn bin_frequency(k: usize, n: usize) -> f64 {
    if 2 * k <= n {
        k as f64 / n as f64
    } else {
        (k as f64 - n as f64) / n as f64
    }
}
