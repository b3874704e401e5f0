//! The discrete std grid searched by every blur-level estimator.

use crate::error::{Error, Result};

/// Ascending grid `min, min + step, …, max` (defaults 0.1 to 15.0 by 0.1).
#[derive(Clone, Debug, PartialEq)]
pub struct StdGrid {
    min: f64,
    max: f64,
    step: f64,
    values: Vec<f64>,
}

impl Default for StdGrid {
    fn default() -> Self {
        Self::new(0.1, 15.0, 0.1).expect("default grid is valid")
    }
}

impl StdGrid {
    pub fn new(min: f64, max: f64, step: f64) -> Result<Self> {
        if !(min > 0.0) {
            return Err(Error::param("std_min", format!("{min} must be positive")));
        }
        if !(max >= min) {
            return Err(Error::param("std_max", format!("{max} below std_min {min}")));
        }
        if !(step > 0.0) {
            return Err(Error::param("std_step", format!("{step} must be positive")));
        }
        let n = ((max - min) / step + 1e-9).floor() as usize + 1;
        // round to suppress accumulation drift, so 0.1 + 29·0.1 prints as 3.0
        let values = (0..n).map(|i| ((min + i as f64 * step) * 1e9).round() / 1e9).collect();
        Ok(Self { min, max, step, values })
    }

    /// Grid with explicit values (ascending, positive).
    pub fn from_values(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::param("grid", "empty std grid"));
        }
        if values.windows(2).any(|w| !(w[1] > w[0])) || !(values[0] > 0.0) {
            return Err(Error::param("grid", "values must be positive and strictly ascending"));
        }
        let step = if values.len() > 1 { values[1] - values[0] } else { 1.0 };
        Ok(Self { min: values[0], max: *values.last().unwrap(), step, values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        *self.values.last().unwrap()
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Index of the nearest grid value, ties toward the larger one; the flag is
    /// set when `std` lay outside `[min, max]` and was clamped.
    pub fn nearest_index(&self, std: f64) -> (usize, bool) {
        if std <= self.min() {
            return (0, std < self.min() - 1e-12);
        }
        if std >= self.max() {
            return (self.len() - 1, std > self.max() + 1e-12);
        }
        let upper = self.values.partition_point(|&v| v < std);
        let lower = upper - 1;
        let (dl, du) = (std - self.values[lower], self.values[upper] - std);
        (if du <= dl + 1e-12 { upper } else { lower }, false)
    }

    pub fn snap(&self, std: f64) -> f64 {
        self.values[self.nearest_index(std).0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_150_points() {
        let g = StdGrid::default();
        assert_eq!(g.len(), 150);
        assert_eq!(g.min(), 0.1);
        assert_eq!(g.max(), 15.0);
        assert_eq!(g.values()[29], 3.0);
    }

    #[test]
    fn snapping_and_ties() {
        let g = StdGrid::default();
        assert_eq!(g.snap(3.0), 3.0);
        assert_eq!(g.snap(3.04), 3.0);
        assert_eq!(g.snap(3.05), 3.1);
        assert_eq!(g.nearest_index(40.0), (149, true));
        assert_eq!(g.nearest_index(0.01), (0, true));
        assert_eq!(g.nearest_index(0.1), (0, false));
    }

    #[test]
    fn invalid_grids_rejected() {
        assert!(StdGrid::new(0.0, 1.0, 0.1).is_err());
        assert!(StdGrid::new(1.0, 0.5, 0.1).is_err());
        assert!(StdGrid::from_values(vec![]).is_err());
        assert!(StdGrid::from_values(vec![1.0, 1.0]).is_err());
    }
}
