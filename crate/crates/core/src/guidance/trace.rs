use std::path::Path;

use crate::error::Result;
use crate::io::write_atomic;

/// State after one guided step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    /// Timestep the step started from.
    pub t: usize,
    pub residual: f64,
    /// Refined stds after the step.
    pub stds: Vec<f64>,
    pub mean_scale: f64,
    pub active: Vec<bool>,
}

/// Per-step diagnostics of one sampling run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<StepRecord>,
}

impl Trace {
    pub fn push(&mut self, r: StepRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Lines `t<TAB>residual<TAB>std_1..std_n<TAB>mean(A_t)`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&format!("{}\t{}", r.t, r.residual));
            for v in &r.stds {
                s.push_str(&format!("\t{v}"));
            }
            s.push_str(&format!("\t{}\n", r.mean_scale));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    /// Number of increases of the running mean of the residual over the last
    /// `fraction` of the steps, the running mean taken over `window` steps.
    pub fn residual_rises(&self, fraction: f64, window: usize) -> usize {
        let n = self.records.len();
        let start = n - ((n as f64 * fraction).round() as usize).min(n);
        let tail: Vec<f64> = self.records[start..].iter().map(|r| r.residual).collect();
        if tail.len() < window + 1 {
            return 0;
        }
        let means: Vec<f64> = tail.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect();
        means.windows(2).filter(|m| m[1] > m[0] * (1.0 + 1e-9)).count()
    }
}
