//! Small sample statistics used by the experiments.

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};

/// Asymptotic two-sided Kolmogorov-Smirnov constant at level 0.05.
pub const KS_C_05: f64 = 1.358;

/// Two-sided KS distance between the empirical law of `samples` and N(0, 1).
pub fn ks_statistic_normal(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n == 0 {
        return f64::NAN;
    }
    let normal = Normal::standard();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in sorted.iter().enumerate() {
        let f = normal.cdf(x);
        d = d.max((i + 1) as f64 / nf - f).max(f - i as f64 / nf);
    }
    d
}

pub fn ks_critical_value(n: usize) -> f64 {
    KS_C_05 / (n as f64).sqrt()
}

/// True when all samples coincide, so that a KS comparison with a continuous law
/// is meaningless.
pub fn is_degenerate(samples: &[f64]) -> bool {
    samples.windows(2).all(|w| w[0] == w[1])
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `(mean, standard error of the mean)`.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    /// Samples outside `[lo, hi]`.
    pub outside: u64,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize, lo: f64, hi: f64) -> Self {
        let mut counts = vec![0u64; bins];
        let mut outside = 0;
        let w = (hi - lo) / bins as f64;
        for &v in values {
            if !(lo..=hi).contains(&v) {
                outside += 1;
                continue;
            }
            let k = (((v - lo) / w) as usize).min(bins - 1);
            counts[k] += 1;
        }
        Self { lo, hi, counts, outside }
    }

    pub fn centers(&self) -> Vec<f64> {
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        (0..self.counts.len()).map(|k| self.lo + (k as f64 + 0.5) * w).collect()
    }

    /// Counts scaled to a probability density over all samples.
    pub fn densities(&self) -> Vec<f64> {
        let total: u64 = self.counts.iter().sum::<u64>() + self.outside;
        let w = (self.hi - self.lo) / self.counts.len() as f64;
        self.counts.iter().map(|&c| c as f64 / (total.max(1) as f64 * w)).collect()
    }
}
