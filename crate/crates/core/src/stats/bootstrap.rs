//! Percentile bootstrap of the mean.
//!
//! Resample `r` draws its indices from a ChaCha stream selected by `r`, so
//! the result is identical whether resamples run sequentially or in
//! parallel.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{mean, StatsError};

pub const DEFAULT_RESAMPLES: usize = 10_000;
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub n_resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_resamples: DEFAULT_RESAMPLES,
            level: DEFAULT_LEVEL,
            seed: 0,
        }
    }
}

impl BootstrapConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn resamples(mut self, n: usize) -> Self {
        self.n_resamples = n;
        self
    }

    pub fn level(mut self, level: f64) -> Self {
        self.level = level;
        self
    }

    fn check(&self) -> Result<(), StatsError> {
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(StatsError::InvalidLevel(self.level));
        }
        if self.n_resamples == 0 {
            return Err(StatsError::NoResamples);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub low: f64,
    pub high: f64,
}

impl Interval {
    pub fn point(v: f64) -> Self {
        Self { low: v, high: v }
    }

    pub fn width(&self) -> f64 {
        self.high - self.low
    }

    pub fn contains(&self, v: f64) -> bool {
        self.low <= v && v <= self.high
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.low <= other.high && other.low <= self.high
    }
}

/// Linear-interpolation percentile of sorted data, `q` in [0, 1].
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * (rank - lo as f64)
    }
}

/// Percentile interval of resampled means for one sample.
pub fn bootstrap_ci(values: &[f64], config: &BootstrapConfig) -> Result<Interval, StatsError> {
    Ok(bootstrap_ci_columns(&[values], config)?[0])
}

/// Percentile intervals for several aligned columns, all resampled with the
/// same row indices.
pub fn bootstrap_ci_columns(columns: &[&[f64]], config: &BootstrapConfig) -> Result<Vec<Interval>, StatsError> {
    config.check()?;
    let n = columns.first().map(|c| c.len()).ok_or(StatsError::Empty)?;
    if n == 0 {
        return Err(StatsError::Empty);
    }
    if let Some(c) = columns.iter().find(|c| c.len() != n) {
        return Err(StatsError::LengthMismatch(n, c.len()));
    }
    let constant: Vec<Option<f64>> = columns
        .iter()
        .map(|c| c.iter().all(|v| *v == c[0]).then_some(c[0]))
        .collect();

    let resampled: Vec<Vec<f64>> = (0..config.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(r as u64);
            let mut sums = vec![0.0; columns.len()];
            for _ in 0..n {
                let i = rng.random_range(0..n);
                for (sum, col) in sums.iter_mut().zip(columns) {
                    *sum += col[i];
                }
            }
            sums.into_iter().map(|s| s / n as f64).collect()
        })
        .collect();

    let tail = (1.0 - config.level) / 2.0;
    Ok(constant
        .iter()
        .enumerate()
        .map(|(j, c)| {
            if let Some(v) = c {
                return Interval::point(*v);
            }
            let mut means: Vec<f64> = resampled.iter().map(|m| m[j]).collect();
            means.sort_by(f64::total_cmp);
            Interval {
                low: percentile_sorted(&means, tail),
                high: percentile_sorted(&means, 1.0 - tail),
            }
        })
        .collect())
}

/// Mean with its percentile interval.
pub fn mean_ci(values: &[f64], config: &BootstrapConfig) -> Result<(f64, Interval), StatsError> {
    let ci = bootstrap_ci(values, config)?;
    Ok((mean(values), ci))
}
