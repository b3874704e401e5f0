//! Named parameter blocks and their on-disk layout: one `BGT1` tensor per
//! block plus a `manifest.tsv` of `name<TAB>shape<TAB>file` lines. Values
//! round-trip through 32-bit floats.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::ImageBuf;
use crate::io::{read_tensor, write_atomic, write_tensor};

/// A named parameter block; `shape` is informational, `data` is row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: &str, shape: &[usize]) -> Self {
        Self { name: name.to_string(), shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn shape_text(&self) -> String {
        self.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
    }
}

pub fn save_tensors(dir: &Path, tensors: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for p in tensors {
        let file = format!("{}.bgt", p.name);
        let rows = p.shape.first().copied().unwrap_or(1).max(1);
        let img = ImageBuf::new(rows, p.data.len() / rows, 1, p.data.clone())?;
        write_tensor(&dir.join(&file), &img)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", p.name, p.shape_text(), file));
    }
    write_atomic(&dir.join("manifest.tsv"), manifest.as_bytes())
}

/// Fills `layout` (names and shapes fixed by the caller) from a saved
/// directory, checking that every block is present with the same shape.
pub fn load_tensors(dir: &Path, layout: &mut [Tensor]) -> Result<()> {
    let entries = read_manifest(dir)?;
    let path = dir.join("manifest.tsv");
    if entries.len() != layout.len() {
        return Err(Error::format(&path, format!("{} entries, expected {}", entries.len(), layout.len())));
    }
    for p in layout.iter_mut() {
        let (_, shape, file) = entries
            .iter()
            .find(|e| e.0 == p.name)
            .ok_or_else(|| Error::format(&path, format!("missing {}", p.name)))?;
        if *shape != p.shape_text() {
            return Err(Error::format(&path, format!("{} has shape {shape}, expected {}", p.name, p.shape_text())));
        }
        let t = read_tensor::<f64>(&dir.join(file))?;
        if t.len() != p.data.len() {
            return Err(Error::format(&dir.join(file), format!("{} values, expected {}", t.len(), p.data.len())));
        }
        p.data = t.into_vec();
    }
    Ok(())
}

/// `(name, shape, file)` triples in file order.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String, String)>> {
    let path = dir.join("manifest.tsv");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(&path, format!("line {}: expected name, shape and file", lineno + 1)));
        }
        entries.push((fields[0].to_string(), fields[1].to_string(), fields[2].to_string()));
    }
    Ok(entries)
}

/// Heavy-ball SGD or Adam state over a list of parameter blocks.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: i32,
}

impl OptimizerState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Self { first: zeros.clone(), second: zeros, steps: 0 }
    }

    /// SGD: `v = μ v + g`, `w -= lr v`.
    pub fn sgd(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64, momentum: f64) {
        self.steps += 1;
        for ((p, v), g) in params.iter_mut().zip(&mut self.first).zip(grads) {
            for ((w, m), d) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *m = momentum * *m + d;
                *w -= lr * *m;
            }
        }
    }

    /// Adam with `β1 = beta1`, `β2 = 0.999`, `ε = 1e-8`.
    pub fn adam(&mut self, params: &mut [Tensor], grads: &[Vec<f64>], lr: f64, beta1: f64) {
        self.steps += 1;
        let beta2 = 0.999;
        let (c1, c2) = (1.0 - beta1.powi(self.steps), 1.0 - f64::powi(beta2, self.steps));
        for (((p, m1), m2), g) in params.iter_mut().zip(&mut self.first).zip(&mut self.second).zip(grads) {
            for (((w, m), r), d) in p.data.iter_mut().zip(m1.iter_mut()).zip(m2.iter_mut()).zip(g) {
                *m = beta1 * *m + (1.0 - beta1) * d;
                *r = beta2 * *r + (1.0 - beta2) * d * d;
                *w -= lr * (*m / c1) / ((*r / c2).sqrt() + 1e-8);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Tensor::zeros("layer.weight", &[2, 3]);
        a.data = vec![0.5, -1.25, 3.0, 0.1, 0.2, 0.3];
        let b = Tensor { name: "layer.bias".into(), shape: vec![2], data: vec![1.0, 2.0] };
        save_tensors(dir.path(), &[a.clone(), b.clone()]).unwrap();
        let mut layout = vec![Tensor::zeros("layer.weight", &[2, 3]), Tensor::zeros("layer.bias", &[2])];
        load_tensors(dir.path(), &mut layout).unwrap();
        assert_eq!(layout[1].data, b.data);
        for (u, v) in a.data.iter().zip(&layout[0].data) {
            assert_eq!(*v, *u as f32 as f64);
        }
        let mut wrong = vec![Tensor::zeros("layer.weight", &[3, 2]), Tensor::zeros("layer.bias", &[2])];
        assert!(load_tensors(dir.path(), &mut wrong).is_err());
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = vec![Tensor { name: "w".into(), shape: vec![1], data: vec![1.0] }];
        let mut opt = OptimizerState::new(&p);
        opt.sgd(&mut p, &[vec![1.0]], 0.1, 0.9);
        assert!((p[0].data[0] - 0.9).abs() < 1e-15);
        opt.sgd(&mut p, &[vec![1.0]], 0.1, 0.9);
        assert!((p[0].data[0] - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = vec![Tensor { name: "w".into(), shape: vec![2], data: vec![0.0, 0.0] }];
        let mut opt = OptimizerState::new(&p);
        opt.adam(&mut p, &[vec![3.0, -0.001]], 0.01, 0.9);
        assert!((p[0].data[0] + 0.01).abs() < 1e-6);
        assert!((p[0].data[1] - 0.01).abs() < 1e-4);
    }
}
