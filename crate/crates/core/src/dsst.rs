//! Starting-step lookup table: for each blur std, the first diffusion step at
//! which the forward-diffused blurry and clean corpora become indistinguishable
//! under a second-moment statistic.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gaussian::{convolve, GaussianKernel};
use crate::grid::StdGrid;
use crate::image::{to_model_range, ImageBuf};
use crate::io::write_atomic;
use crate::scalar::{lit, to_f64, Real};
use crate::schedule::DiffusionSchedule;

/// Default convergence tolerance on the log-statistic gap.
pub const DEFAULT_TOL: f64 = 1e-3;

/// Expectation statistic compared between clean and blurred corpora.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatKind {
    /// Per-pixel second moment about the corpus mean, in model range.
    SecondMoment,
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StatKind::SecondMoment => f.write_str("second-moment"),
        }
    }
}

impl FromStr for StatKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "second-moment" => Ok(StatKind::SecondMoment),
            other => Err(Error::Config(format!("unknown table statistic `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DssTable {
    entries: Vec<(f64, usize)>,
    tol: f64,
    stat: StatKind,
    num_steps: usize,
}

/// A table lookup; `clamped` is set when the query fell outside the grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lookup {
    pub t_start: usize,
    pub clamped: bool,
}

/// Corpus second moments: clean `m_x` and blurred `m_y(std)` per grid entry.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusMoments {
    pub clean: f64,
    pub blurred: Vec<(f64, f64)>,
}

/// Second moments about the scalar corpus mean, after mapping to model range.
pub fn corpus_moments<S: Real>(corpus: &[ImageBuf<S>], grid: &StdGrid) -> Result<CorpusMoments> {
    if corpus.is_empty() {
        return Err(Error::Build("corpus is empty".into()));
    }
    let model: Vec<ImageBuf<S>> = corpus.iter().map(to_model_range).collect();
    let total: f64 = model.iter().map(|x| to_f64(x.sum())).sum();
    let count: usize = model.iter().map(|x| x.len()).sum();
    let mu = total / count as f64;
    let moment = |imgs: &mut dyn Iterator<Item = ImageBuf<S>>| -> f64 {
        let mut acc = 0.0;
        let mut n = 0usize;
        for img in imgs {
            acc += img.as_slice().iter().map(|&v| (to_f64(v) - mu).powi(2)).sum::<f64>();
            n += img.len();
        }
        acc / n as f64
    };
    let clean = moment(&mut model.iter().cloned());
    let mut blurred = Vec::with_capacity(grid.len());
    for &s in grid.values() {
        let k = GaussianKernel::new(lit::<S>(s))?;
        blurred.push((s, moment(&mut model.iter().map(|x| convolve(x, &k)))));
    }
    Ok(CorpusMoments { clean, blurred })
}

/// `log(ab·m_x + 1 - ab) - log(ab·m_y + 1 - ab)` at every timestep.
pub fn log_gap<S: Real>(m_x: f64, m_y: f64, sched: &DiffusionSchedule<S>) -> Vec<f64> {
    sched
        .alpha_bars()
        .iter()
        .map(|&ab| {
            let ab = to_f64(ab);
            (ab * m_x + 1.0 - ab).ln() - (ab * m_y + 1.0 - ab).ln()
        })
        .collect()
}

/// Smallest `t` whose gap is at most `tol`; the last step if none is.
pub fn starting_step<S: Real>(m_x: f64, m_y: f64, tol: f64, sched: &DiffusionSchedule<S>) -> usize {
    let gap = log_gap(m_x, m_y, sched);
    gap.iter().position(|&g| g <= tol).unwrap_or(gap.len() - 1)
}

impl DssTable {
    /// Builds the table from precomputed corpus moments.
    pub fn from_moments<S: Real>(moments: &CorpusMoments, tol: f64, sched: &DiffusionSchedule<S>) -> Result<Self> {
        if !(tol > 0.0) {
            return Err(Error::param("tol", format!("{tol} must be positive")));
        }
        if moments.blurred.is_empty() {
            return Err(Error::Build("no grid entries".into()));
        }
        if !(moments.clean > 0.0) || moments.blurred.iter().any(|&(_, m)| !(m > 0.0)) {
            return Err(Error::Build("corpus statistic is not positive (degenerate corpus)".into()));
        }
        let entries = moments
            .blurred
            .iter()
            .map(|&(s, m)| (s, starting_step(moments.clean, m, tol, sched)))
            .collect();
        Self::new(entries, tol, StatKind::SecondMoment, sched.num_steps())
    }

    pub fn new(entries: Vec<(f64, usize)>, tol: f64, stat: StatKind, num_steps: usize) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Build("table has no entries".into()));
        }
        if entries.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(Error::Build("table stds must be strictly ascending".into()));
        }
        if let Some(&(s, t)) = entries.iter().find(|&&(_, t)| t >= num_steps) {
            return Err(Error::Build(format!("t_start {t} for std {s} outside [0, {})", num_steps)));
        }
        Ok(Self { entries, tol, stat, num_steps })
    }

    pub fn entries(&self) -> &[(f64, usize)] {
        &self.entries
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn stat(&self) -> StatKind {
        self.stat
    }

    pub fn num_steps(&self) -> usize {
        self.num_steps
    }

    /// Whether `t_start` is non-decreasing in std.
    pub fn is_monotone(&self) -> bool {
        self.entries.windows(2).all(|w| w[1].1 >= w[0].1)
    }

    /// Snaps to the nearest entry (ties toward the larger std) and returns its step.
    pub fn lookup(&self, std_hat: f64) -> Lookup {
        let stds: Vec<f64> = self.entries.iter().map(|e| e.0).collect();
        let grid = StdGrid::from_values(stds).expect("table stds validated ascending");
        let (i, clamped) = grid.nearest_index(std_hat);
        Lookup { t_start: self.entries[i].1, clamped }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# dsst tol={} stat={} T={}\n", self.tol, self.stat, self.num_steps);
        for (std, t) in &self.entries {
            s.push_str(&format!("{std}\t{t}\n"));
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Format { .. } => e,
            other => Error::format(path, other.to_string()),
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |r: String| Error::Config(r);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty table".into()))?;
        let rest = header
            .strip_prefix("# dsst ")
            .ok_or_else(|| bad(format!("missing `# dsst` header, found `{header}`")))?;
        let (mut tol, mut stat, mut steps) = (None, None, None);
        for field in rest.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(format!("bad header field `{field}`")))?;
            match k {
                "tol" => tol = Some(v.parse::<f64>().map_err(|_| bad(format!("bad tol `{v}`")))?),
                "stat" => stat = Some(v.parse::<StatKind>()?),
                "T" => steps = Some(v.parse::<usize>().map_err(|_| bad(format!("bad T `{v}`")))?),
                _ => return Err(bad(format!("unknown header field `{k}`"))),
            }
        }
        let (Some(tol), Some(stat), Some(steps)) = (tol, stat, steps) else {
            return Err(bad("header must give tol, stat and T".into()));
        };
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once('\t')
                .ok_or_else(|| bad(format!("line {}: expected std<TAB>t_start", i + 2)))?;
            let s = a.parse::<f64>().map_err(|_| bad(format!("line {}: bad std `{a}`", i + 2)))?;
            let t = b.trim().parse::<usize>().map_err(|_| bad(format!("line {}: bad t_start `{b}`", i + 2)))?;
            entries.push((s, t));
        }
        Self::new(entries, tol, stat, steps)
    }
}

/// Measures corpus moments over `grid` and builds the table.
pub fn build_table<S: Real>(
    corpus: &[ImageBuf<S>],
    grid: &StdGrid,
    tol: f64,
    sched: &DiffusionSchedule<S>,
) -> Result<DssTable> {
    let moments = corpus_moments(corpus, grid)?;
    DssTable::from_moments(&moments, tol, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::make_schedule;

    #[test]
    fn analytic_example() {
        let sched = DiffusionSchedule::<f64>::standard();
        let t = starting_step(1.0, 0.5, 1e-3, &sched);
        // closed form: 1 / (1 - 0.5·ab) ≤ e^tol  ⇔  ab ≤ 2 (1 - e^-tol)
        let bound = 2.0 * (1.0 - (-1e-3f64).exp());
        let expected = sched.alpha_bars().iter().position(|&ab| ab <= bound).unwrap();
        assert_eq!(t, expected);
        assert_eq!(t, 783);
    }

    #[test]
    fn gap_non_increasing_in_t() {
        let sched = DiffusionSchedule::<f64>::standard();
        for (mx, my) in [(1.0, 0.5), (0.3, 0.01), (2.0, 1.99)] {
            let g = log_gap(mx, my, &sched);
            assert!(g.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn limits() {
        let sched = DiffusionSchedule::<f64>::standard();
        assert_eq!(starting_step(1.0, 1.0, 1e-3, &sched), 0);
        assert_eq!(starting_step(1.0, 0.1, 1e9, &sched), 0);
        let moments = CorpusMoments { clean: 1.0, blurred: vec![(1.0, 0.9), (2.0, 0.5)] };
        let table = DssTable::from_moments(&moments, f64::MAX, &sched).unwrap();
        assert!(table.entries().iter().all(|e| e.1 == 0));
    }

    #[test]
    fn degenerate_corpus_rejected() {
        let sched = make_schedule::<f64>(10, 0.01, 0.2).unwrap();
        let corpus = vec![ImageBuf::<f64>::filled(4, 4, 1, 0.5)];
        let err = build_table(&corpus, &StdGrid::default(), 1e-3, &sched).unwrap_err();
        assert!(matches!(err, Error::Build(_)));
    }

    #[test]
    fn lookup_rules() {
        let t = DssTable::new(vec![(1.0, 10), (2.0, 20), (3.0, 30)], 1e-3, StatKind::SecondMoment, 100).unwrap();
        assert_eq!(t.lookup(2.0), Lookup { t_start: 20, clamped: false });
        assert_eq!(t.lookup(1.5), Lookup { t_start: 20, clamped: false });
        assert_eq!(t.lookup(1.4), Lookup { t_start: 10, clamped: false });
        assert_eq!(t.lookup(9.0), Lookup { t_start: 30, clamped: true });
        assert_eq!(t.lookup(0.2), Lookup { t_start: 10, clamped: true });
    }

    #[test]
    fn text_round_trip() {
        let t = DssTable::new(vec![(0.1, 0), (0.2, 5)], 1e-3, StatKind::SecondMoment, 1000).unwrap();
        let text = t.to_text();
        assert!(text.starts_with("# dsst tol=0.001 stat=second-moment T=1000\n0.1\t0\n"));
        assert_eq!(DssTable::parse(&text).unwrap(), t);
        assert!(DssTable::parse("0.1\t0\n").is_err());
    }
}
