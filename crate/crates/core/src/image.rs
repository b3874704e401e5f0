//! Dense row-major raster used for every signal in the pipeline.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::{from_usize, lit, Real};

/// H×W×C raster, row-major with interleaved channels.
///
/// Values are unconstrained internally; clamping to the unit range only happens
/// at export (see [`ImageBuf::clamp_unit`]).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuf<S> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<S>,
}

impl<S: Real> ImageBuf<S> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<S>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::param("shape", format!("{height}x{width}x{channels} has a zero extent")));
        }
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::Dimension {
                expected: format!("{expected} samples for {height}x{width}x{channels}"),
                got: format!("{} samples", data.len()),
            });
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: S) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image extents must be positive");
        Self { height, width, channels, data: vec![value; height * width * channels] }
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, S::zero())
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.height, other.width, other.channels)
    }

    /// Builds an image by evaluating `f(row, col, channel)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> S,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0, "image extents must be positive");
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self { height, width, channels, data }
    }

    /// Image of i.i.d. standard-normal samples.
    ///
    /// Samples are drawn as `f64` and cast so the random stream does not depend
    /// on the scalar type.
    pub fn standard_normal<R: Rng + ?Sized>(
        height: usize,
        width: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        Self::from_fn(height, width, channels, |_, _, _| {
            let v: f64 = rng.sample(StandardNormal);
            lit(v)
        })
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> S {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: S) {
        let i = self.index(y, x, c);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.shape() == other.shape()
    }

    /// Fails with a dimension error unless `other` has the same shape.
    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Dimension {
                expected: format_shape(self.shape()),
                got: format_shape(other.shape()),
            })
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped images.
    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_shape(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    /// `self += k * other`.
    pub fn axpy(&mut self, k: S, other: &Self) -> Result<()> {
        self.check_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<S> {
        self.check_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> S {
        self.sum() / from_usize(self.data.len())
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn min_value(&self) -> S {
        self.data.iter().copied().fold(S::infinity(), S::min)
    }

    pub fn max_value(&self) -> S {
        self.data.iter().copied().fold(S::neg_infinity(), S::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Clamps every sample into `[0, 1]`; used only when exporting results.
    pub fn clamp_unit(&self) -> Self {
        self.map(|v| v.max(S::zero()).min(S::one()))
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> Self {
        Self::from_fn(self.height, self.width, 1, |y, x, _| self.at(y, x, c))
    }

    /// Converts the scalar type.
    pub fn cast<T: Real>(&self) -> ImageBuf<T> {
        ImageBuf {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| lit::<T>(crate::scalar::to_f64(v))).collect(),
        }
    }
}

pub(crate) fn format_shape((h, w, c): (usize, usize, usize)) -> String {
    format!("{h}x{w}x{c}")
}

/// Maps unit-range images into the diffusion model's `[-1, 1]` working range.
pub fn to_model_range<S: Real>(img: &ImageBuf<S>) -> ImageBuf<S> {
    let two = lit::<S>(2.0);
    img.map(|v| two * v - S::one())
}

/// Inverse of [`to_model_range`].
pub fn from_model_range<S: Real>(img: &ImageBuf<S>) -> ImageBuf<S> {
    let half = lit::<S>(0.5);
    img.map(|v| (v + S::one()) * half)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(ImageBuf::<f64>::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageBuf::<f64>::new(0, 2, 1, vec![]).is_err());
        assert!(ImageBuf::<f64>::new(2, 3, 2, vec![0.0; 12]).is_ok());
    }

    #[test]
    fn interleaved_indexing() {
        let img = ImageBuf::<f64>::from_fn(2, 3, 2, |y, x, c| (100 * y + 10 * x + c) as f64);
        assert_eq!(img.at(1, 2, 1), 121.0);
        assert_eq!(img.as_slice()[img.index(1, 0, 1)], 101.0);
    }

    #[test]
    fn model_range_round_trip() {
        let img = ImageBuf::<f64>::from_fn(3, 3, 1, |y, x, _| (y * 3 + x) as f64 / 8.0);
        let back = from_model_range(&to_model_range(&img));
        for (a, b) in img.as_slice().iter().zip(back.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = ImageBuf::<f64>::zeros(2, 2, 1);
        let b = ImageBuf::<f64>::zeros(2, 3, 1);
        assert!(matches!(a.add(&b), Err(Error::Dimension { .. })));
    }
}
