//! Region-wise guidance scaling: the adjuster interface, two heuristic
//! baselines, and the trainable convolutional adjuster.

mod loss;
mod net;
mod swt;
mod train;

pub use loss::{dgsa_loss, dgsa_loss_grad, gradient_structure_distance, DEFAULT_GAMMA, GMS_C};
pub use net::{time_embedding, DgsaNet, ForwardCache, EMBED_DIM, HIDDEN};
pub use train::{
    draw_episode, episode_loss, episode_scale_map, mean_loss, train_dgsa, Optimizer, train_from, validation_episodes, CurvePoint, Episode, Stage,
    TrainConfig, TrainContext, TrainOutcome,
};
pub use swt::{swt_adjoint, swt_decompose, swt_reconstruct, SwtBands};

use crate::error::{Error, Result};
use crate::gaussian::reflect_index;
use crate::image::ImageBuf;
use crate::scalar::{lit, to_f64, Real};

/// Per-pixel guidance scale with every entry in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleMap<S> {
    values: ImageBuf<S>,
}

impl<S: Real> ScaleMap<S> {
    pub fn new(values: ImageBuf<S>) -> Result<Self> {
        if let Some(v) = values.as_slice().iter().find(|&&v| !(v >= S::zero() && v <= S::one())) {
            return Err(Error::Contract(format!("scale map entry {v} outside [0, 1]")));
        }
        Ok(Self { values })
    }

    pub fn constant(like: &ImageBuf<S>, s: S) -> Self {
        let (h, w, c) = like.shape();
        Self { values: ImageBuf::filled(h, w, c, s) }
    }

    pub fn values(&self) -> &ImageBuf<S> {
        &self.values
    }

    pub fn into_values(self) -> ImageBuf<S> {
        self.values
    }

    pub fn mean(&self) -> S {
        self.values.mean()
    }

    pub fn is_zero(&self) -> bool {
        self.values.as_slice().iter().all(|&v| v == S::zero())
    }
}

/// Produces the guidance scale map from the measurement, the current clean
/// estimate and the timestep.
pub trait ScaleAdjuster<S: Real>: Send + Sync {
    fn adjust(&self, y_acute: &ImageBuf<S>, x_t0: &ImageBuf<S>, t: usize) -> Result<ScaleMap<S>>;
}

impl<S: Real, A: ScaleAdjuster<S> + ?Sized> ScaleAdjuster<S> for &A {
    fn adjust(&self, y_acute: &ImageBuf<S>, x_t0: &ImageBuf<S>, t: usize) -> Result<ScaleMap<S>> {
        (**self).adjust(y_acute, x_t0, t)
    }
}

impl<S: Real, A: ScaleAdjuster<S> + ?Sized> ScaleAdjuster<S> for Box<A> {
    fn adjust(&self, y_acute: &ImageBuf<S>, x_t0: &ImageBuf<S>, t: usize) -> Result<ScaleMap<S>> {
        (**self).adjust(y_acute, x_t0, t)
    }
}

/// The same scale everywhere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConstantAdjuster {
    s: f64,
}

impl ConstantAdjuster {
    pub fn new(s: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::param("s", format!("{s} outside [0, 1]")));
        }
        Ok(Self { s })
    }

    pub fn scale(&self) -> f64 {
        self.s
    }
}

impl<S: Real> ScaleAdjuster<S> for ConstantAdjuster {
    fn adjust(&self, _y: &ImageBuf<S>, x_t0: &ImageBuf<S>, _t: usize) -> Result<ScaleMap<S>> {
        Ok(ScaleMap::constant(x_t0, lit(self.s)))
    }
}

/// `A = 1 / (1 + localvar(x_t0) / pivot)`: weaker guidance where the current
/// estimate is busy.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceAdjuster {
    window: usize,
    pivot: f64,
}

impl VarianceAdjuster {
    pub fn new(window: usize, pivot: f64) -> Result<Self> {
        if window < 3 || window % 2 == 0 {
            return Err(Error::param("window", format!("{window} must be odd and at least 3")));
        }
        if !(pivot > 0.0) {
            return Err(Error::param("pivot", format!("{pivot} must be positive")));
        }
        Ok(Self { window, pivot })
    }
}

impl<S: Real> ScaleAdjuster<S> for VarianceAdjuster {
    fn adjust(&self, _y: &ImageBuf<S>, x_t0: &ImageBuf<S>, _t: usize) -> Result<ScaleMap<S>> {
        let var = local_variance(x_t0, self.window);
        let p = self.pivot;
        ScaleMap::new(var.map(|v| lit(1.0 / (1.0 + to_f64(v).max(0.0) / p))))
    }
}

/// Per-channel variance over a `window × window` box with reflect boundary.
pub fn local_variance<S: Real>(img: &ImageBuf<S>, window: usize) -> ImageBuf<S> {
    let (h, w, c) = img.shape();
    let r = (window / 2) as isize;
    let n = (window * window) as f64;
    ImageBuf::from_fn(h, w, c, |y, x, ch| {
        let (mut s, mut s2) = (0.0, 0.0);
        for dy in -r..=r {
            let yy = reflect_index(y as isize + dy, h);
            for dx in -r..=r {
                let v = to_f64(img.at(yy, reflect_index(x as isize + dx, w), ch));
                s += v;
                s2 += v * v;
            }
        }
        let m = s / n;
        lit((s2 / n - m * m).max(0.0))
    })
}
