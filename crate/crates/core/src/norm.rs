//! Q99 action normalization.
//!
//! Each action dimension is mapped affinely from its empirical `[q_low, q_high]`
//! onto `[-1, 1]` and clipped. Quantiles use linear interpolation between order
//! statistics: position `q * (n - 1)` in the sorted sample.

use serde::{Deserialize, Serialize};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::sim::Action;

/// Half-width used when a dimension's quantile interval is degenerate.
pub const DEGENERATE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub low_quantile: f64,
    pub high_quantile: f64,
    /// Always `true`; recorded so the file states the convention it was built with.
    pub clip: bool,
    pub q_low: Vec<f64>,
    pub q_high: Vec<f64>,
}

/// Linear-interpolation quantile of `sorted` (ascending, non-empty).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, q)
}

impl NormStats {
    /// Stats over raw per-dimension columns.
    pub fn from_columns(columns: &[Vec<f64>], low_q: f64, high_q: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&low_q) || !(0.0..=1.0).contains(&high_q) || low_q > high_q {
            return Err(Error::Config(format!(
                "quantiles must satisfy 0 <= low <= high <= 1, got {low_q}, {high_q}"
            )));
        }
        let mut q_low = Vec::with_capacity(columns.len());
        let mut q_high = Vec::with_capacity(columns.len());
        for col in columns {
            if col.len() < 2 {
                return Err(Error::InsufficientData(format!(
                    "need at least 2 steps for action statistics, got {}",
                    col.len()
                )));
            }
            let mut sorted = col.clone();
            sorted.sort_by(f64::total_cmp);
            let mut lo = quantile_sorted(&sorted, low_q);
            let mut hi = quantile_sorted(&sorted, high_q);
            if hi - lo < DEGENERATE_EPS {
                let mid = 0.5 * (lo + hi);
                lo = mid - DEGENERATE_EPS;
                hi = mid + DEGENERATE_EPS;
            }
            q_low.push(lo);
            q_high.push(hi);
        }
        Ok(Self {
            low_quantile: low_q,
            high_quantile: high_q,
            clip: true,
            q_low,
            q_high,
        })
    }

    pub fn dim(&self) -> usize {
        self.q_low.len()
    }

    pub fn normalize(&self, a: &[f64]) -> Vec<f64> {
        a.iter()
            .enumerate()
            .map(|(i, &x)| {
                let (lo, hi) = (self.q_low[i], self.q_high[i]);
                (2.0 * (x - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
            })
            .collect()
    }

    pub fn denormalize(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .enumerate()
            .map(|(i, &v)| {
                let (lo, hi) = (self.q_low[i], self.q_high[i]);
                lo + (v + 1.0) * 0.5 * (hi - lo)
            })
            .collect()
    }

    pub fn validate(&self, action_dim: usize) -> Result<()> {
        if self.q_low.len() != action_dim || self.q_high.len() != action_dim {
            return Err(Error::dim("normalization stats", action_dim, self.q_low.len()));
        }
        for (lo, hi) in self.q_low.iter().zip(&self.q_high) {
            if !(lo < hi) {
                return Err(Error::InvalidInterval { min: *lo, max: *hi });
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let stats: Self = serde_json::from_str(&text)?;
        stats.validate(Action::DIM)?;
        Ok(stats)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Per-dimension stats over every recorded action.
pub fn compute_norm_stats(episodes: &[Episode], low_q: f64, high_q: f64) -> Result<NormStats> {
    let mut columns = vec![Vec::new(); Action::DIM];
    for ep in episodes {
        for step in &ep.steps {
            for (col, v) in columns.iter_mut().zip(step.action.to_array()) {
                col.push(v);
            }
        }
    }
    NormStats::from_columns(&columns, low_q, high_q)
}
