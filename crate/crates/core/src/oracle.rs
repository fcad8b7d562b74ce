//! Brute-force ground truth: exhaustive grid search over weighted reward sums, central
//! finite differences, and sample-quality metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rewards::{eval_explicit, RewardTerm};

/// Upper bound on the number of grid points a search may evaluate.
pub const GRID_BUDGET: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: usize) -> Result<Self> {
        let g = GridSpec { bounds, resolution };
        g.validate()?;
        Ok(g)
    }

    /// The square `[lo, hi]^dim`.
    pub fn cube(dim: usize, lo: f64, hi: f64, resolution: usize) -> Result<Self> {
        Self::new(vec![(lo, hi); dim], resolution)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 {
            return Err(Error::invalid("grid resolution must be >= 2"));
        }
        if self.bounds.is_empty() || self.bounds.len() > 3 {
            return Err(Error::invalid("exhaustive search supports 1 to 3 dimensions"));
        }
        if self.bounds.iter().any(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::invalid("grid bounds must be finite with lo < hi"));
        }
        let total = self
            .resolution
            .checked_pow(self.bounds.len() as u32)
            .unwrap_or(usize::MAX);
        if total > GRID_BUDGET {
            return Err(Error::invalid(format!(
                "grid of {total} points exceeds the budget of {GRID_BUDGET}"
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        (hi - lo) / (self.resolution - 1) as f64
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let (lo, hi) = self.bounds[axis];
        if i + 1 == self.resolution {
            hi
        } else {
            lo + i as f64 * self.spacing(axis)
        }
    }

    /// Point at flat index `idx`; the last axis varies fastest.
    pub fn point(&self, idx: usize) -> Vec<f64> {
        let d = self.dim();
        let mut p = vec![0.0; d];
        let mut rem = idx;
        for axis in (0..d).rev() {
            p[axis] = self.coord(axis, rem % self.resolution);
            rem /= self.resolution;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub argmax: Vec<f64>,
    pub max_value: f64,
    pub per_term: Vec<f64>,
    /// Other grid points beating all their axis neighbours, best first.
    pub runners_up: Vec<(Vec<f64>, f64)>,
}

/// Exhaustive maximization of `sum_i w_i R_i` over the grid.
pub fn grid_argmax(terms: &[RewardTerm], weights: &[f64], grid: &GridSpec) -> Result<ModeReport> {
    grid.validate()?;
    if terms.is_empty() || terms.len() != weights.len() {
        return Err(Error::invalid("need one weight per reward term"));
    }
    if let Some(t) = terms.iter().find(|t| !t.is_explicit()) {
        return Err(Error::invalid(format!("term `{}` has no analytic value", t.name)));
    }
    let n = grid.len();
    let mut values = Vec::with_capacity(n);
    let mut best = 0;
    for idx in 0..n {
        let p = grid.point(idx);
        let mut v = 0.0;
        for (t, w) in terms.iter().zip(weights) {
            v += w * eval_explicit(t, &p, None)?.0;
        }
        if idx == 0 || v > values[best] {
            best = idx;
        }
        values.push(v);
    }

    let res = grid.resolution;
    let d = grid.dim();
    let mut maxima: Vec<(usize, f64)> = Vec::new();
    for (idx, &v) in values.iter().enumerate() {
        if idx == best {
            continue;
        }
        let mut stride = 1;
        let mut is_max = true;
        for _ in 0..d {
            let i = (idx / stride) % res;
            if (i > 0 && values[idx - stride] >= v) || (i + 1 < res && values[idx + stride] >= v) {
                is_max = false;
                break;
            }
            stride *= res;
        }
        if is_max {
            maxima.push((idx, v));
        }
    }
    maxima.sort_by(|a, b| b.1.total_cmp(&a.1));
    maxima.truncate(8);

    let argmax = grid.point(best);
    let per_term = terms
        .iter()
        .map(|t| eval_explicit(t, &argmax, None).map(|r| r.0))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModeReport {
        argmax,
        max_value: values[best],
        per_term,
        runners_up: maxima.into_iter().map(|(i, v)| (grid.point(i), v)).collect(),
    })
}

/// Central differences `(f(x + h e_j) - f(x - h e_j)) / 2h`.
pub fn finite_diff_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut p = x.to_vec();
    let mut g = Vec::with_capacity(x.len());
    for j in 0..x.len() {
        p[j] = x[j] + h;
        let up = f(&p);
        p[j] = x[j] - h;
        let down = f(&p);
        p[j] = x[j];
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::numeric("finite differences", format!("non-finite value along axis {j}")));
        }
        g.push((up - down) / (2.0 * h));
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coverage {
    pub per_mode: Vec<f64>,
    pub on_mode: f64,
    pub mean_min_distance: f64,
}

pub fn mode_coverage(samples: &[Vec<f64>], modes: &[Vec<f64>], radius: f64) -> Result<Coverage> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    if modes.is_empty() {
        return Err(Error::invalid("no modes"));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid("radius must be positive"));
    }
    let mut hits = vec![0usize; modes.len()];
    let mut on = 0usize;
    let mut dist_sum = 0.0;
    for s in samples {
        let mut nearest = f64::INFINITY;
        let mut any = false;
        for (h, m) in hits.iter_mut().zip(modes) {
            let dist = s.iter().zip(m).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            nearest = nearest.min(dist);
            if dist <= radius {
                *h += 1;
                any = true;
            }
        }
        on += usize::from(any);
        dist_sum += nearest;
    }
    let n = samples.len() as f64;
    Ok(Coverage {
        per_mode: hits.into_iter().map(|h| h as f64 / n).collect(),
        on_mode: on as f64 / n,
        mean_min_distance: dist_sum / n,
    })
}

/// Cosine similarity; 0 when either vector is zero.
pub fn diag_cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
    c.clamp(-1.0, 1.0)
}
