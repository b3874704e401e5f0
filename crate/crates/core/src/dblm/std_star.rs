use super::Restorer;
use crate::error::{Error, Result};
use crate::gaussian::{convolve, GaussianKernel};
use crate::grid::StdGrid;
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};

/// Outcome of the brute-force std* search.
#[derive(Clone, Debug, PartialEq)]
pub struct StdStar {
    pub std: f64,
    /// No grid std met the tolerance; `std` is the grid maximum.
    pub saturated: bool,
    /// Mean absolute error `|k^s ⊗ (restore(y) - x)|` at every grid std.
    pub errors: Vec<f64>,
}

impl StdStar {
    /// Indices where the error curve rises by more than `slack`.
    pub fn monotonicity_violations(&self, slack: f64) -> Vec<usize> {
        self.errors
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0] + slack)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Smallest grid std whose blurred restoration error falls strictly below `xi`.
pub fn find_std_star<S: Real, R: Restorer<S> + ?Sized>(
    y: &ImageBuf<S>,
    x: &ImageBuf<S>,
    restorer: &R,
    xi: f64,
    grid: &StdGrid,
) -> Result<StdStar> {
    if grid.is_empty() {
        return Err(Error::param("grid", "empty std grid"));
    }
    y.check_shape(x)?;
    let restored = restorer.restore(y)?;
    // blur is linear, so k ⊗ r - k ⊗ x = k ⊗ (r - x)
    let diff = restored.sub(x)?;
    let n = diff.len() as f64;
    let errors: Vec<f64> = grid
        .values()
        .iter()
        .map(|&s| {
            let k = GaussianKernel::new(lit::<S>(s))?;
            Ok(convolve(&diff, &k).as_slice().iter().map(|&v| to_f64(v).abs()).sum::<f64>() / n)
        })
        .collect::<Result<_>>()?;
    match errors.iter().position(|&e| e < xi) {
        Some(i) => Ok(StdStar { std: grid.values()[i], saturated: false, errors }),
        None => Ok(StdStar { std: grid.max(), saturated: true, errors }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dblm::IdentityRestorer;

    fn toy(n: usize) -> ImageBuf<f64> {
        ImageBuf::from_fn(n, n, 1, |y, x, _| {
            let (fy, fx) = (y as f64, x as f64);
            0.5 + 0.25 * (fx / 1.3).sin() * (fy / 2.1).cos() + if x > n / 2 { 0.1 } else { -0.1 }
        })
    }

    #[test]
    fn identical_inputs_give_grid_minimum() {
        let x = toy(16);
        let r = find_std_star(&x, &x, &IdentityRestorer, 0.01, &StdGrid::default()).unwrap();
        assert_eq!(r.std, 0.1);
        assert!(!r.saturated);
    }

    #[test]
    fn zero_tolerance_saturates() {
        let x = toy(16);
        let y = convolve(&x, &GaussianKernel::new(2.0).unwrap());
        let r = find_std_star(&y, &x, &IdentityRestorer, 0.0, &StdGrid::default()).unwrap();
        assert!(r.saturated);
        assert_eq!(r.std, 15.0);
    }

    #[test]
    fn error_curve_is_non_increasing() {
        let x = toy(24);
        let y = convolve(&x, &GaussianKernel::new(3.0).unwrap());
        let r = find_std_star(&y, &x, &IdentityRestorer, 0.01, &StdGrid::default()).unwrap();
        assert!(r.monotonicity_violations(1e-12).is_empty(), "{:?}", r.monotonicity_violations(1e-12));
    }
}
