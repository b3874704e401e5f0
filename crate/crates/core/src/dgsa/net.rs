//! Three-layer convolutional scale adjuster.
//!
//! Input is the measurement and the current clean estimate stacked along
//! channels (`2C` planes); output is one scale plane per image channel. Layers
//! are 3×3 "same" convolutions with zero padding: `2C → 64 → 64 → C`, ELU after
//! the first two and a clamp to `[0, 1]` at the end. A sinusoidal embedding of
//! `t`, projected to 64 values, is added to the first layer's pre-activations.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::params::{load_tensors, read_manifest, save_tensors, Tensor};
use crate::scalar::Real;

use super::{ScaleAdjuster, ScaleMap};

pub const HIDDEN: usize = 64;
pub const EMBED_DIM: usize = 64;

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const TIME_W: usize = 2;
const TIME_B: usize = 3;
const CONV2_W: usize = 4;
const CONV2_B: usize = 5;
const CONV3_W: usize = 6;
const CONV3_B: usize = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct DgsaNet {
    channels: usize,
    params: Vec<Tensor>,
}

/// Activations kept from a forward pass for the backward pass.
pub struct ForwardCache {
    h: usize,
    w: usize,
    col1: Vec<f64>,
    z1: Vec<f64>,
    col2: Vec<f64>,
    z2: Vec<f64>,
    col3: Vec<f64>,
    z3: Vec<f64>,
    embed: Vec<f64>,
}

impl DgsaNet {
    fn layout(channels: usize) -> Vec<Tensor> {
        vec![
            Tensor::zeros("conv1.weight", &[HIDDEN, 2 * channels, 3, 3]),
            Tensor::zeros("conv1.bias", &[HIDDEN]),
            Tensor::zeros("time.weight", &[HIDDEN, EMBED_DIM]),
            Tensor::zeros("time.bias", &[HIDDEN]),
            Tensor::zeros("conv2.weight", &[HIDDEN, HIDDEN, 3, 3]),
            Tensor::zeros("conv2.bias", &[HIDDEN]),
            Tensor::zeros("conv3.weight", &[channels, HIDDEN, 3, 3]),
            Tensor::zeros("conv3.bias", &[channels]),
        ]
    }

    /// He-initialized hidden layers and a zero final layer, so a fresh net
    /// outputs `A ≡ 0`.
    pub fn new(channels: usize, seed: u64) -> Result<Self> {
        if channels == 0 {
            return Err(Error::param("channels", "at least one image channel is required"));
        }
        let mut params = Self::layout(channels);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (idx, fan_in) in [(CONV1_W, 2 * channels * 9), (TIME_W, EMBED_DIM), (CONV2_W, HIDDEN * 9)] {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            for v in &mut params[idx].data {
                *v = dist.sample(&mut rng);
            }
        }
        Ok(Self { channels, params })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Zeroed gradient buffers matching the parameter layout.
    pub fn zero_grads(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Scale map and the cache needed by [`DgsaNet::backward`].
    pub fn forward(&self, y: &ImageBuf<f64>, x0: &ImageBuf<f64>, t: usize) -> Result<(ImageBuf<f64>, ForwardCache)> {
        y.check_shape(x0)?;
        let (h, w, c) = y.shape();
        if c != self.channels {
            return Err(Error::Dimension {
                expected: format!("{} channels", self.channels),
                got: format!("{c} channels"),
            });
        }
        let hw = h * w;
        let mut input = vec![0.0; 2 * c * hw];
        for p in 0..hw {
            for ch in 0..c {
                input[ch * hw + p] = y.as_slice()[p * c + ch];
                input[(c + ch) * hw + p] = x0.as_slice()[p * c + ch];
            }
        }
        let embed = time_embedding(t);
        let mut shift = self.params[TIME_B].data.clone();
        for (o, s) in shift.iter_mut().enumerate() {
            let row = &self.params[TIME_W].data[o * EMBED_DIM..(o + 1) * EMBED_DIM];
            *s += row.iter().zip(&embed).map(|(a, b)| a * b).sum::<f64>();
        }

        let col1 = im2col(&input, 2 * c, h, w);
        let mut z1 = conv(&col1, &self.params[CONV1_W].data, &self.params[CONV1_B].data, 2 * c, HIDDEN, hw);
        for (o, s) in shift.iter().enumerate() {
            z1[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v += s);
        }
        let a1: Vec<f64> = z1.iter().map(|&z| elu(z)).collect();
        let col2 = im2col(&a1, HIDDEN, h, w);
        let z2 = conv(&col2, &self.params[CONV2_W].data, &self.params[CONV2_B].data, HIDDEN, HIDDEN, hw);
        let a2: Vec<f64> = z2.iter().map(|&z| elu(z)).collect();
        let col3 = im2col(&a2, HIDDEN, h, w);
        let z3 = conv(&col3, &self.params[CONV3_W].data, &self.params[CONV3_B].data, HIDDEN, c, hw);

        let out = ImageBuf::from_fn(h, w, c, |yy, xx, ch| z3[ch * hw + yy * w + xx].clamp(0.0, 1.0));
        Ok((out, ForwardCache { h, w, col1, z1, col2, z2, col3, z3, embed }))
    }

    /// Accumulates parameter gradients for the upstream gradient `d_out` of the
    /// output map. The clamp passes gradient on the closed interval `[0, 1]`,
    /// which lets a zero-initialized head start learning, and outside it only
    /// when a descent step would move the pre-activation back toward the
    /// interval, so saturated pixels can recover.
    pub fn backward(&self, cache: &ForwardCache, d_out: &ImageBuf<f64>, grads: &mut [Vec<f64>]) -> Result<()> {
        let (h, w, c) = (cache.h, cache.w, self.channels);
        if d_out.shape() != (h, w, c) {
            return Err(Error::Dimension {
                expected: crate::image::format_shape((h, w, c)),
                got: crate::image::format_shape(d_out.shape()),
            });
        }
        let hw = h * w;
        let mut dz3 = vec![0.0; c * hw];
        for p in 0..hw {
            for ch in 0..c {
                let z = cache.z3[ch * hw + p];
                let g = d_out.as_slice()[p * c + ch];
                // descent moves z by -g: keep the gradient when that heads into [0, 1]
                if (0.0..=1.0).contains(&z) || (z < 0.0 && g < 0.0) || (z > 1.0 && g > 0.0) {
                    dz3[ch * hw + p] = g;
                }
            }
        }
        let da2 = conv_backward(&cache.col3, &dz3, &self.params[CONV3_W].data, HIDDEN, c, hw, grads, CONV3_W, CONV3_B);
        let da2 = col2im(&da2, HIDDEN, h, w);
        let dz2: Vec<f64> = da2.iter().zip(&cache.z2).map(|(&g, &z)| g * elu_grad(z)).collect();
        let da1 = conv_backward(&cache.col2, &dz2, &self.params[CONV2_W].data, HIDDEN, HIDDEN, hw, grads, CONV2_W, CONV2_B);
        let da1 = col2im(&da1, HIDDEN, h, w);
        let dz1: Vec<f64> = da1.iter().zip(&cache.z1).map(|(&g, &z)| g * elu_grad(z)).collect();
        for o in 0..HIDDEN {
            let s: f64 = dz1[o * hw..(o + 1) * hw].iter().sum();
            grads[TIME_B][o] += s;
            for (k, e) in cache.embed.iter().enumerate() {
                grads[TIME_W][o * EMBED_DIM + k] += s * e;
            }
        }
        // the input gradient is not needed
        let _ = conv_weight_grads(&cache.col1, &dz1, 2 * c, HIDDEN, hw, grads, CONV1_W, CONV1_B);
        Ok(())
    }

    /// Writes the weights in the parameter-manifest layout.
    pub fn save(&self, dir: &Path) -> Result<()> {
        save_tensors(dir, &self.params)
    }

    /// Loads weights saved by [`DgsaNet::save`]; the channel count is read from
    /// the final layer's shape.
    pub fn load(dir: &Path) -> Result<Self> {
        let channels = read_manifest(dir)?
            .iter()
            .find(|e| e.0 == "conv3.bias")
            .and_then(|e| e.1.parse::<usize>().ok())
            .filter(|&c| c > 0)
            .ok_or_else(|| Error::format(&dir.join("manifest.tsv"), "no usable conv3.bias entry"))?;
        let mut params = Self::layout(channels);
        load_tensors(dir, &mut params)?;
        Ok(Self { channels, params })
    }
}

impl<S: Real> ScaleAdjuster<S> for DgsaNet {
    fn adjust(&self, y_acute: &ImageBuf<S>, x_t0: &ImageBuf<S>, t: usize) -> Result<ScaleMap<S>> {
        let (out, _) = self.forward(&y_acute.cast(), &x_t0.cast(), t)?;
        ScaleMap::new(out.cast::<S>().map(|v| v.max(S::zero()).min(S::one())))
    }
}

/// `[sin(t f_k), cos(t f_k)]` with `f_k = 10000^(-k / (EMBED_DIM / 2))`.
pub fn time_embedding(t: usize) -> Vec<f64> {
    let half = EMBED_DIM / 2;
    let mut e = Vec::with_capacity(EMBED_DIM);
    let freqs: Vec<f64> = (0..half).map(|k| (-(10000f64).ln() * k as f64 / half as f64).exp()).collect();
    e.extend(freqs.iter().map(|f| (t as f64 * f).sin()));
    e.extend(freqs.iter().map(|f| (t as f64 * f).cos()));
    e
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

fn elu_grad(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Planar `cin × (h·w)` input to a `(cin·9) × (h·w)` patch matrix, zero padded.
fn im2col(input: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; cin * 9 * hw];
    for i in 0..cin {
        let plane = &input[i * hw..(i + 1) * hw];
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let row = &mut col[(i * 9 + k) * hw..(i * 9 + k + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        row[y * w + x] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col`]: scatters patch gradients back onto the planes.
fn col2im(col: &[f64], cin: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; cin * hw];
    for i in 0..cin {
        for k in 0..9 {
            let (dy, dx) = (k as isize / 3 - 1, k as isize % 3 - 1);
            let row = &col[(i * 9 + k) * hw..(i * 9 + k + 1) * hw];
            let plane = &mut out[i * hw..(i + 1) * hw];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = x as isize + dx;
                    if sx >= 0 && sx < w as isize {
                        plane[sy as usize * w + sx as usize] += row[y * w + x];
                    }
                }
            }
        }
    }
    out
}

/// `W (cout × cin·9) · col (cin·9 × hw) + b`.
fn conv(col: &[f64], weight: &[f64], bias: &[f64], cin: usize, cout: usize, hw: usize) -> Vec<f64> {
    let k = cin * 9;
    let mut out = vec![0.0; cout * hw];
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    // SAFETY: slice lengths match the (m, k, n) extents and strides below.
    unsafe {
        matrixmultiply::dgemm(
            cout, k, hw, 1.0,
            weight.as_ptr(), k as isize, 1,
            col.as_ptr(), hw as isize, 1,
            1.0,
            out.as_mut_ptr(), hw as isize, 1,
        );
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_weight_grads(
    col: &[f64],
    dz: &[f64],
    cin: usize,
    cout: usize,
    hw: usize,
    grads: &mut [Vec<f64>],
    w_idx: usize,
    b_idx: usize,
) {
    let k = cin * 9;
    for o in 0..cout {
        grads[b_idx][o] += dz[o * hw..(o + 1) * hw].iter().sum::<f64>();
    }
    // dW += dz (cout × hw) · colᵀ (hw × k)
    // SAFETY: extents and strides match the buffers.
    unsafe {
        matrixmultiply::dgemm(
            cout, hw, k, 1.0,
            dz.as_ptr(), hw as isize, 1,
            col.as_ptr(), 1, hw as isize,
            1.0,
            grads[w_idx].as_mut_ptr(), k as isize, 1,
        );
    }
}

/// Weight and bias gradients plus the patch-matrix gradient `Wᵀ dz`.
#[allow(clippy::too_many_arguments)]
fn conv_backward(
    col: &[f64],
    dz: &[f64],
    weight: &[f64],
    cin: usize,
    cout: usize,
    hw: usize,
    grads: &mut [Vec<f64>],
    w_idx: usize,
    b_idx: usize,
) -> Vec<f64> {
    conv_weight_grads(col, dz, cin, cout, hw, grads, w_idx, b_idx);
    let k = cin * 9;
    let mut dcol = vec![0.0; k * hw];
    // SAFETY: extents and strides match the buffers.
    unsafe {
        matrixmultiply::dgemm(
            k, cout, hw, 1.0,
            weight.as_ptr(), 1, k as isize,
            dz.as_ptr(), hw as isize, 1,
            0.0,
            dcol.as_mut_ptr(), hw as isize, 1,
        );
    }
    dcol
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn randomized(channels: usize, seed: u64) -> DgsaNet {
        let mut net = DgsaNet::new(channels, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for p in net.params_mut() {
            for v in &mut p.data {
                *v += rng.random_range(-0.05..0.05);
            }
        }
        // keep the head inside (0, 1) so the clamp is smooth at the probe
        for v in &mut net.params_mut()[CONV3_B].data {
            *v = 0.5;
        }
        for v in &mut net.params_mut()[CONV3_W].data {
            *v *= 0.1;
        }
        net
    }

    #[test]
    fn parameter_count_follows_architecture() {
        for c in [1, 3] {
            let net = DgsaNet::new(c, 0).unwrap();
            let expected = HIDDEN * 2 * c * 9 + HIDDEN + HIDDEN * EMBED_DIM + HIDDEN + HIDDEN * HIDDEN * 9 + HIDDEN + c * HIDDEN * 9 + c;
            assert_eq!(net.param_count(), expected);
        }
        assert_eq!(DgsaNet::new(1, 0).unwrap().param_count(), 42_881);
    }

    #[test]
    fn fresh_net_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = DgsaNet::new(1, 3).unwrap();
        let y = ImageBuf::<f64>::standard_normal(8, 8, 1, &mut rng);
        let x = ImageBuf::<f64>::standard_normal(8, 8, 1, &mut rng);
        let map = ScaleAdjuster::<f64>::adjust(&net, &y, &x, 400).unwrap();
        assert!(map.is_zero());
    }

    #[test]
    fn shape_preserving_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = randomized(3, 4);
        let y = ImageBuf::<f64>::standard_normal(5, 7, 3, &mut rng).scale(20.0);
        let x = ImageBuf::<f64>::standard_normal(5, 7, 3, &mut rng).scale(20.0);
        let (out, _) = net.forward(&y, &x, 17).unwrap();
        assert_eq!(out.shape(), (5, 7, 3));
        assert!(out.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = randomized(1, 9);
        let y = ImageBuf::<f64>::standard_normal(5, 6, 1, &mut rng);
        let x = ImageBuf::<f64>::standard_normal(5, 6, 1, &mut rng);
        let probe = ImageBuf::<f64>::standard_normal(5, 6, 1, &mut rng);
        let t = 250;
        let objective = |n: &DgsaNet| n.forward(&y, &x, t).unwrap().0.dot(&probe).unwrap();
        let (_, cache) = net.forward(&y, &x, t).unwrap();
        let mut grads = net.zero_grads();
        net.backward(&cache, &probe, &mut grads).unwrap();
        let h = 1e-6;
        for (pi, p) in net.params().iter().enumerate() {
            for j in (0..p.data.len()).step_by(p.data.len() / 7 + 1) {
                let mut plus = net.clone();
                plus.params_mut()[pi].data[j] += h;
                let mut minus = net.clone();
                minus.params_mut()[pi].data[j] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                let g = grads[pi][j];
                assert!((fd - g).abs() <= 1e-6 * fd.abs().max(1e-2), "{} [{j}]: fd {fd} vs {g}", p.name);
            }
        }
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let net = randomized(1, 5);
        net.save(dir.path()).unwrap();
        let back = DgsaNet::load(dir.path()).unwrap();
        assert_eq!(back.channels(), 1);
        for (a, b) in net.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (u, v) in a.data.iter().zip(&b.data) {
                assert_eq!(*v, *u as f32 as f64);
            }
        }
        let manifest = std::fs::read_to_string(dir.path().join("manifest.tsv")).unwrap();
        assert!(manifest.starts_with("conv1.weight\t64x2x3x3\tconv1.weight.bgt\n"));
    }

    #[test]
    fn time_embedding_is_unit_pairs() {
        let e = time_embedding(123);
        assert_eq!(e.len(), EMBED_DIM);
        for k in 0..EMBED_DIM / 2 {
            assert!((e[k] * e[k] + e[k + EMBED_DIM / 2].powi(2) - 1.0).abs() < 1e-12);
        }
        assert_eq!(time_embedding(0)[0], 0.0);
    }
}
