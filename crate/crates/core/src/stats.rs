//! Measurement functions: per-incident and mean MTTR, resource efficiency,
//! relative deltas, percentile bootstrap, Mann-Whitney U and Cliff's delta.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::telemetry::IncidentRecord;

pub const DEFAULT_BOOTSTRAP_RESAMPLES: usize = 10_000;
/// Largest `n * m` for which the exact U distribution is enumerated.
pub const EXACT_MWU_LIMIT: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    Empty,
    #[error("reference value must be positive, got {0}")]
    NonPositiveReference(f64),
    #[error("confidence level must lie in (0, 1), got {0}")]
    BadLevel(f64),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// `t_recovered - t_detected`, or `None` while unresolved.
pub fn mttr_per_incident(incident: &IncidentRecord) -> Option<f64> {
    match (incident.t_detected_s, incident.t_recovered_s) {
        (Some(d), Some(r)) if r >= d => Some((r - d) as f64),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MttrSummary {
    pub values_s: Vec<f64>,
    pub unresolved: usize,
    /// Resolved incidents with zero duration.
    pub degenerate: usize,
    pub mean_s: Option<f64>,
}

pub fn summarize_mttr<'a>(incidents: impl IntoIterator<Item = &'a IncidentRecord>) -> MttrSummary {
    let mut values_s = Vec::new();
    let mut unresolved = 0;
    for inc in incidents {
        match mttr_per_incident(inc) {
            Some(v) => values_s.push(v),
            None => unresolved += 1,
        }
    }
    let degenerate = values_s.iter().filter(|&&v| v == 0.0).count();
    let mean_s = mean(&values_s);
    MttrSummary {
        values_s,
        unresolved,
        degenerate,
        mean_s,
    }
}

pub fn mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// Time-mean of delivered RPS over time-mean of consumed resource. `None`
/// when the resource mean is zero.
pub fn resource_efficiency(rps: &[f64], resource: &[f64]) -> Result<Option<f64>, StatsError> {
    if rps.len() != resource.len() {
        return Err(StatsError::LengthMismatch(rps.len(), resource.len()));
    }
    let (Some(r), Some(c)) = (mean(rps), mean(resource)) else {
        return Err(StatsError::Empty);
    };
    if c == 0.0 {
        return Ok(None);
    }
    Ok(Some(r / c))
}

fn check_reference(x: f64) -> Result<(), StatsError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(StatsError::NonPositiveReference(x))
    }
}

/// Percentage reduction of a lower-is-better metric.
pub fn delta_mttr(baseline: f64, cpe: f64) -> Result<f64, StatsError> {
    check_reference(baseline)?;
    Ok((baseline - cpe) / baseline * 100.0)
}

/// Percentage gain of a higher-is-better metric.
pub fn delta_re(baseline: f64, cpe: f64) -> Result<f64, StatsError> {
    check_reference(baseline)?;
    Ok((cpe - baseline) / baseline * 100.0)
}

/// Same reduction form as [`delta_mttr`], for violations per hour.
pub fn delta_violations(baseline: f64, cpe: f64) -> Result<f64, StatsError> {
    delta_mttr(baseline, cpe)
}

/// Linear-interpolation quantile of sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// Percentile bootstrap CI of the mean from `resamples` seeded resamples
/// drawn with replacement.
pub fn bootstrap_ci(values: &[f64], resamples: usize, level: f64, seed: u64) -> Result<ConfidenceInterval, StatsError> {
    if values.is_empty() || resamples == 0 {
        return Err(StatsError::Empty);
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::BadLevel(level));
    }
    let n = values.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| values[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = 1.0 - level;
    Ok(ConfidenceInterval {
        lo: quantile_sorted(&stats, alpha / 2.0),
        hi: quantile_sorted(&stats, 1.0 - alpha / 2.0),
        level,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MwuMethod {
    Exact,
    NormalApprox,
}

impl MwuMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MwuMethod::Exact => "exact",
            MwuMethod::NormalApprox => "normal approximation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// Wins of sample A over B, ties counted half.
    pub u_a: f64,
    pub u_b: f64,
    /// Two-sided.
    pub p_value: f64,
    pub method: MwuMethod,
}

/// Midranks of the pooled sample, returned in input order, plus the tie
/// correction term `sum(t^3 - t)`.
fn midranks(pooled: &[f64]) -> (Vec<f64>, f64) {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        let t = (j - i + 1) as f64;
        ties += t * t * t - t;
        i = j + 1;
    }
    (ranks, ties)
}

/// Number of arrangements giving each U value for sizes `n`, `m`
/// (no ties), indexed by U.
fn exact_u_counts(n: usize, m: usize) -> Vec<u128> {
    // counts[i][j][u]: arrangements of i A-items and j B-items with U = u.
    let max_u = n * m;
    let mut prev: Vec<Vec<u128>> = vec![vec![0; max_u + 1]; m + 1];
    for row in prev.iter_mut() {
        row[0] = 1;
    }
    for i in 1..=n {
        let mut cur: Vec<Vec<u128>> = vec![vec![0; max_u + 1]; m + 1];
        cur[0][0] = 1;
        for j in 1..=m {
            for u in 0..=i * j {
                // Largest element is an A (beats all j Bs) or a B.
                let from_a = if u >= j { prev[j][u - j] } else { 0 };
                cur[j][u] = from_a + cur[j - 1][u];
            }
        }
        prev = cur;
    }
    prev.swap_remove(m)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let (ranks, ties) = midranks(&pooled);
    let r_a: f64 = ranks[..n].iter().sum();
    let nm = (n * m) as f64;
    let u_a = r_a - (n * (n + 1)) as f64 / 2.0;
    let u_b = nm - u_a;

    if n * m <= EXACT_MWU_LIMIT && ties == 0.0 {
        let counts = exact_u_counts(n, m);
        let total: u128 = counts.iter().sum();
        let u = u_a.round() as usize;
        let le: u128 = counts[..=u].iter().sum();
        let ge: u128 = counts[u..].iter().sum();
        let p = (2.0 * le.min(ge) as f64 / total as f64).min(1.0);
        return Ok(MwuResult {
            u_a,
            u_b,
            p_value: p,
            method: MwuMethod::Exact,
        });
    }

    let total = (n + m) as f64;
    let mu = nm / 2.0;
    let var = nm / 12.0 * ((total + 1.0) - ties / (total * (total - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u_a - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::standard();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(MwuResult {
        u_a,
        u_b,
        p_value: p,
        method: MwuMethod::NormalApprox,
    })
}

/// `(#(a > b) - #(a < b)) / (n m)`.
pub fn cliffs_delta(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::Empty);
    }
    let mut sorted = b.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut net: i64 = 0;
    for &x in a {
        let below = sorted.partition_point(|&y| y < x) as i64;
        let not_above = sorted.partition_point(|&y| y <= x) as i64;
        let above = sorted.len() as i64 - not_above;
        net += below - above;
    }
    Ok(net as f64 / (a.len() * b.len()) as f64)
}
