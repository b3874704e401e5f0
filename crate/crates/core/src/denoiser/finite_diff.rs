use super::EpsModel;
use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::scalar::{lit, Real};

/// Gradient of `s(x) = <eps(x, t), cotangent>` by central differences over the
/// sample indices in `subset`; entries outside the subset are left at zero.
///
/// This equals the transpose-Jacobian product restricted to the probed samples,
/// so it can stand in for [`super::Denoiser::vjp`] on models without an
/// analytic Jacobian. Cost is two `eps` evaluations per probed sample.
pub fn finite_diff_vjp<S: Real, M: EpsModel<S> + ?Sized>(
    model: &M,
    x_t: &ImageBuf<S>,
    t: usize,
    cotangent: &ImageBuf<S>,
    step: S,
    subset: &[usize],
) -> Result<ImageBuf<S>> {
    if subset.is_empty() {
        return Err(Error::param("subset", "no samples to probe"));
    }
    if !(step > S::zero()) {
        return Err(Error::param("step", format!("{step} must be positive")));
    }
    x_t.check_shape(cotangent)?;
    if let Some(&bad) = subset.iter().find(|&&i| i >= x_t.len()) {
        return Err(Error::param("subset", format!("index {bad} outside {} samples", x_t.len())));
    }
    let mut out = ImageBuf::zeros_like(x_t);
    if cotangent.as_slice().iter().all(|&v| v == S::zero()) {
        return Ok(out);
    }
    let two_h = lit::<S>(2.0) * step;
    let mut probe = x_t.clone();
    for &i in subset {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + step;
        let plus = model.eps(&probe, t)?.dot(cotangent)?;
        probe.as_mut_slice()[i] = orig - step;
        let minus = model.eps(&probe, t)?.dot(cotangent)?;
        probe.as_mut_slice()[i] = orig;
        out.as_mut_slice()[i] = (plus - minus) / two_h;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// eps(x) = A x for a fixed dense matrix.
    struct Linear {
        a: Vec<Vec<f64>>,
    }

    impl EpsModel<f64> for Linear {
        fn eps(&self, x: &ImageBuf<f64>, _t: usize) -> Result<ImageBuf<f64>> {
            let v: Vec<f64> =
                self.a.iter().map(|row| row.iter().zip(x.as_slice()).map(|(a, b)| a * b).sum()).collect();
            ImageBuf::new(x.height(), x.width(), x.channels(), v)
        }
    }

    /// eps(x)_i = sin(x_i) + x_{i+1}^3 (cyclic), smooth and nonlinear.
    struct Smooth;

    impl EpsModel<f64> for Smooth {
        fn eps(&self, x: &ImageBuf<f64>, _t: usize) -> Result<ImageBuf<f64>> {
            let s = x.as_slice();
            let n = s.len();
            let v = (0..n).map(|i| s[i].sin() + s[(i + 1) % n].powi(3)).collect();
            ImageBuf::new(x.height(), x.width(), x.channels(), v)
        }
    }

    fn smooth_grad(x: &[f64], u: &[f64], i: usize) -> f64 {
        let n = x.len();
        u[i] * x[i].cos() + u[(i + n - 1) % n] * 3.0 * x[i] * x[i]
    }

    #[test]
    fn linear_model_gives_transpose_product() {
        let a: Vec<Vec<f64>> = (0..6).map(|r| (0..6).map(|c| ((r * 7 + c * 3) % 5) as f64 - 2.0).collect()).collect();
        let model = Linear { a: a.clone() };
        let x = ImageBuf::new(2, 3, 1, vec![0.3, -0.1, 0.7, 1.2, 0.0, -0.5]).unwrap();
        let u = ImageBuf::new(2, 3, 1, vec![1.0, 2.0, -1.0, 0.5, 0.25, -3.0]).unwrap();
        let subset = [0, 2, 5];
        let g = finite_diff_vjp(&model, &x, 0, &u, 1e-3, &subset).unwrap();
        for i in 0..6 {
            let expected: f64 = if subset.contains(&i) { (0..6).map(|r| a[r][i] * u.as_slice()[r]).sum() } else { 0.0 };
            assert!((g.as_slice()[i] - expected).abs() < 1e-8);
        }
    }

    #[test]
    fn second_order_convergence() {
        let x = ImageBuf::new(1, 4, 1, vec![0.4, -0.9, 1.1, 0.2]).unwrap();
        let u = ImageBuf::new(1, 4, 1, vec![1.0, -0.5, 0.3, 2.0]).unwrap();
        let subset = [0, 1, 2, 3];
        let err = |h: f64| -> f64 {
            let g = finite_diff_vjp(&Smooth, &x, 0, &u, h, &subset).unwrap();
            (0..4).map(|i| (g.as_slice()[i] - smooth_grad(x.as_slice(), u.as_slice(), i)).abs()).sum()
        };
        let ratio = err(1e-2) / err(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
    }

    #[test]
    fn zero_cotangent_and_empty_subset() {
        let x = ImageBuf::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let z = ImageBuf::zeros(1, 3, 1);
        let g = finite_diff_vjp(&Smooth, &x, 0, &z, 1e-4, &[0, 1]).unwrap();
        assert!(g.as_slice().iter().all(|&v| v == 0.0));
        assert!(matches!(finite_diff_vjp(&Smooth, &x, 0, &z, 1e-4, &[]), Err(Error::Param { .. })));
    }
}
