//! Distance statistics and the prior-knowledge acceptance threshold.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

/// Number of grid points searched between the two means.
pub const THRESHOLD_GRID: usize = 10_000;

/// Streaming mean and sample variance (Welford).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: usize,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Sample standard deviation; `None` below two samples.
    pub fn std(&self) -> Option<f64> {
        (self.count >= 2).then(|| (self.m2 / (self.count - 1) as f64).max(0.0).sqrt())
    }
}

/// Summary of observed distances at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub mu_other: f64,
    pub sigma_other: f64,
    pub batch_distances: Vec<f64>,
    pub target_distance: Option<f64>,
}

impl DistanceStats {
    /// Mean and sample standard deviation of `distances`; needs at least two.
    pub fn from_distances(distances: Vec<f64>) -> Option<Self> {
        let mut s = RunningStats::default();
        distances.iter().for_each(|&d| s.push(d));
        Some(Self { mu_other: s.mean(), sigma_other: s.std()?, batch_distances: distances, target_distance: None })
    }
}

/// `ln Φ(z)` for the standard normal, accurate far into the lower tail.
pub fn log_normal_cdf(z: f64) -> f64 {
    if z < -30.0 {
        let z2 = z * z;
        -0.5 * z2 - (-z).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln() + (1.0 - 1.0 / z2 + 3.0 / (z2 * z2)).ln()
    } else {
        (0.5 * erfc(-z / std::f64::consts::SQRT_2)).ln()
    }
}

/// `ln P(X < t)` for `X ~ N(mu, sigma²)`; a zero `sigma` is a point mass.
fn log_below(t: f64, mu: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        log_normal_cdf((t - mu) / sigma)
    } else if t > mu {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// `ln P(X > t)` for `X ~ N(mu, sigma²)`.
fn log_above(t: f64, mu: f64, sigma: f64) -> f64 {
    if sigma > 0.0 {
        log_normal_cdf((mu - t) / sigma)
    } else if t < mu {
        0.0
    } else {
        f64::NEG_INFINITY
    }
}

/// Log success probability of accepting the true token at rank `rank`:
/// all `rank − 1` better-ranked wrong candidates must stay above `t` and the
/// true one must fall below it.
pub fn log_success(t: f64, target: (f64, f64), other: (f64, f64), rank: usize) -> f64 {
    let reject = if rank > 1 { (rank - 1) as f64 * log_above(t, other.0, other.1) } else { 0.0 };
    reject + log_below(t, target.0, target.1)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub threshold: f64,
    pub success_probability: f64,
    /// Both distributions had zero spread; the midpoint was returned.
    pub degenerate: bool,
}

/// Maximizes the rank-`rank` success probability over a grid spanning the
/// fitted target and other means. Ties resolve to the larger threshold.
pub fn enhanced_threshold(target_samples: &[f64], other: &DistanceStats, rank: usize) -> ThresholdChoice {
    let rank = rank.max(1);
    let mut ts = RunningStats::default();
    target_samples.iter().for_each(|&x| ts.push(x));
    let target = (ts.mean(), ts.std().unwrap_or(0.0));
    let other_fit = (other.mu_other, other.sigma_other);
    let (lo, hi) = if target.0 <= other_fit.0 { (target.0, other_fit.0) } else { (other_fit.0, target.0) };
    if target.1 == 0.0 && other_fit.1 == 0.0 {
        let t = 0.5 * (lo + hi);
        return ThresholdChoice {
            threshold: t,
            success_probability: log_success(t, target, other_fit, rank).exp(),
            degenerate: true,
        };
    }
    let step = (hi - lo) / (THRESHOLD_GRID - 1) as f64;
    let mut best = (f64::NEG_INFINITY, lo);
    for i in 0..THRESHOLD_GRID {
        let t = if i + 1 == THRESHOLD_GRID { hi } else { lo + step * i as f64 };
        let v = log_success(t, target, other_fit, rank);
        if v >= best.0 {
            best = (v, t);
        }
    }
    ThresholdChoice { threshold: best.1, success_probability: best.0.exp(), degenerate: false }
}
