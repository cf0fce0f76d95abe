//! Estimators, confidence intervals and the two-sample chi-square test.

use std::collections::BTreeMap;

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const Z95: f64 = 1.959963984540054;

/// A point estimate with its standard error and 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorResult {
    /// Replicas run.
    pub n: u64,
    /// Replicas that entered the estimate (those not truncated).
    pub n_used: u64,
    pub mean: f64,
    pub stderr: f64,
    pub ci95: (f64, f64),
    /// Replicas that hit the event cap.
    pub truncated: u64,
}

impl EstimatorResult {
    /// Proportion estimate with a Wilson score interval.
    pub fn proportion(successes: u64, used: u64, truncated: u64) -> Self {
        let n = used as f64;
        if used == 0 {
            return Self { n: truncated, n_used: 0, mean: f64::NAN, stderr: f64::NAN, ci95: (0.0, 1.0), truncated };
        }
        let p = successes as f64 / n;
        let z2 = Z95 * Z95;
        let denom = 1.0 + z2 / n;
        let center = (p + z2 / (2.0 * n)) / denom;
        let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
        // The endpoints are exact at 0 and n successes; rounding would leave a
        // residue of order 1e-17 otherwise.
        let lo = if successes == 0 { 0.0 } else { (center - half).max(0.0) };
        let hi = if successes == used { 1.0 } else { (center + half).min(1.0) };
        Self {
            n: used + truncated,
            n_used: used,
            mean: p,
            stderr: (p * (1.0 - p) / n).sqrt(),
            ci95: (lo, hi),
            truncated,
        }
    }

    /// Sample mean with a normal interval.
    pub fn mean_of(values: &[f64], truncated: u64) -> Self {
        let acc: MeanAccumulator = values.iter().copied().collect();
        acc.result(truncated)
    }
}

/// Streaming mean and variance (Welford), mergeable across workers.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanAccumulator {
    n: u64,
    mean: f64,
    m2: f64,
}

impl MeanAccumulator {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Self) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn result(&self, truncated: u64) -> EstimatorResult {
        let n = self.n as f64;
        let stderr = if self.n == 0 { f64::NAN } else { (self.variance() / n).sqrt() };
        let mean = if self.n == 0 { f64::NAN } else { self.mean };
        EstimatorResult {
            n: self.n + truncated,
            n_used: self.n,
            mean,
            stderr,
            ci95: (mean - Z95 * stderr, mean + Z95 * stderr),
            truncated,
        }
    }
}

impl FromIterator<f64> for MeanAccumulator {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = Self::default();
        for x in iter {
            acc.push(x);
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    /// Both samples fell in a single cell: the laws agree exactly on what
    /// was observed and no test is needed.
    ExactMatch,
    Pass,
    Fail,
}

/// Two-sample chi-square test of homogeneity on categorical outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwoSampleReport {
    pub statistic: String,
    /// Cell label and the counts of the two samples, after pooling. The
    /// pooled cell of rare outcomes is labeled `"pooled"`.
    pub cells: Vec<(String, u64, u64)>,
    pub chi2: f64,
    pub dof: u64,
    pub p_value: f64,
    pub alpha: f64,
    pub verdict: Verdict,
}

/// Compares two samples of cell labels. Cells whose expected count is
/// below 5 in either sample are merged (rarest first) into one pooled cell
/// until every expected count is at least 5.
pub fn chi_square_two_sample(statistic: &str, a: &[u64], b: &[u64], alpha: f64) -> TwoSampleReport {
    let mut table: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for &x in a {
        table.entry(x).or_default().0 += 1;
    }
    for &x in b {
        table.entry(x).or_default().1 += 1;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let min_expected = |ca: u64, cb: u64| {
        let m = (ca + cb) as f64 / total;
        (m * na).min(m * nb)
    };

    let mut cells: Vec<(String, u64, u64)> = table.into_iter().map(|(k, (x, y))| (k.to_string(), x, y)).collect();
    // Rarest first; ties by label for determinism.
    cells.sort_by(|p, q| (p.1 + p.2).cmp(&(q.1 + q.2)).then_with(|| p.0.cmp(&q.0)));
    let mut pooled = (0u64, 0u64);
    let mut start = 0;
    while start < cells.len() && min_expected(cells[start].1, cells[start].2) < 5.0 {
        pooled.0 += cells[start].1;
        pooled.1 += cells[start].2;
        start += 1;
    }
    let mut kept: Vec<(String, u64, u64)> = cells.split_off(start);
    if pooled.0 + pooled.1 > 0 {
        // The pooled cell may itself be too small; absorb the next rarest cells.
        while min_expected(pooled.0, pooled.1) < 5.0 && !kept.is_empty() {
            let next = kept.remove(0);
            pooled.0 += next.1;
            pooled.1 += next.2;
        }
        kept.push(("pooled".to_string(), pooled.0, pooled.1));
    }
    kept.sort_by(|p, q| p.0.cmp(&q.0));

    if kept.len() <= 1 || na == 0.0 || nb == 0.0 {
        return TwoSampleReport {
            statistic: statistic.to_string(),
            cells: kept,
            chi2: 0.0,
            dof: 0,
            p_value: 1.0,
            alpha,
            verdict: Verdict::ExactMatch,
        };
    }
    let mut chi2 = 0.0;
    for (_, x, y) in &kept {
        let m = (x + y) as f64 / total;
        let (ex, ey) = (m * na, m * nb);
        chi2 += (*x as f64 - ex).powi(2) / ex + (*y as f64 - ey).powi(2) / ey;
    }
    let dof = (kept.len() - 1) as u64;
    let p_value = ChiSquared::new(dof as f64).expect("dof >= 1").sf(chi2);
    TwoSampleReport {
        statistic: statistic.to_string(),
        cells: kept,
        chi2,
        dof,
        p_value,
        alpha,
        verdict: if p_value > alpha { Verdict::Pass } else { Verdict::Fail },
    }
}
