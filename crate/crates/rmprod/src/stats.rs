//! Estimators over trial batches: moments, covariances, cumulants, height
//! moments and prediction-vs-estimate reports.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;
use crate::simulate::ProductResult;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("trials have different shapes (N or M)")]
    MixedShapes,
    #[error("need at least {needed} trials, got {got}")]
    TooFewTrials { needed: usize, got: usize },
    #[error("moment {0} was not computed")]
    MissingMoment(u32),
    #[error("cumulant order {0} is not supported (use 3 or 4)")]
    BadOrder(u32),
    #[error("no trials")]
    Empty,
    #[error("unknown statistic {0:?}")]
    UnknownStatistic(String),
}

/// Minimum trials for a covariance estimate.
pub const MIN_TRIALS_COV: usize = 50;
/// Minimum trials for a cumulant estimate.
pub const MIN_TRIALS_CUMULANT: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// `p_k` of the raw `log μ_i`.
    Raw,
    /// `p_k` of `log μ_i / M`.
    Lyapunov,
}

/// Per-trial values of a family of statistics indexed by `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSet {
    pub ks: Vec<u32>,
    /// `values[j][t]` is statistic `ks[j]` of trial `t`.
    pub values: Vec<Vec<f64>>,
    pub trials: usize,
    pub n: usize,
    pub m: usize,
}

impl MomentSet {
    pub fn series(&self, k: u32) -> Result<&[f64], StatsError> {
        self.ks.iter().position(|&x| x == k).map(|j| self.values[j].as_slice()).ok_or(StatsError::MissingMoment(k))
    }

    fn scaled(&self, k: u32, sqrt_m: bool) -> Result<Vec<f64>, StatsError> {
        let s = if sqrt_m { (self.m as f64).sqrt() } else { 1.0 };
        Ok(self.series(k)?.iter().map(|x| s * x).collect())
    }
}

/// Value with a standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

fn shape(results: &[ProductResult]) -> Result<(usize, usize), StatsError> {
    let first = results.first().ok_or(StatsError::Empty)?;
    let (n, m) = (first.n(), first.factors);
    if results.iter().any(|r| r.n() != n || r.factors != m) {
        return Err(StatsError::MixedShapes);
    }
    Ok((n, m))
}

/// `p_k = Σ_i x_i^k` per trial, with `x = log μ` or `log μ / M`.
pub fn empirical_moments(results: &[ProductResult], ks: &[u32], scale: Scale) -> Result<MomentSet, StatsError> {
    let (n, m) = shape(results)?;
    let div = match scale {
        Scale::Raw => 1.0,
        Scale::Lyapunov => m as f64,
    };
    let values = ks
        .iter()
        .map(|&k| results.iter().map(|r| r.log_sv.iter().map(|x| (x / div).powi(k as i32)).sum()).collect())
        .collect();
    Ok(MomentSet { ks: ks.to_vec(), values, trials: results.len(), n, m })
}

/// Same as [`empirical_moments`] on the checkpoint taken at `alpha`
/// (Lyapunov scale still divides by the full `M`).
pub fn checkpoint_moments(results: &[ProductResult], alpha: f64, ks: &[u32]) -> Result<MomentSet, StatsError> {
    let (n, m) = shape(results)?;
    let rows: Vec<&[f64]> = results.iter().map(|r| r.checkpoint(alpha).ok_or(StatsError::MissingMoment(0))).collect::<Result<_, _>>()?;
    let values = ks
        .iter()
        .map(|&k| rows.iter().map(|row| row.iter().map(|x| (x / m as f64).powi(k as i32)).sum()).collect())
        .collect();
    Ok(MomentSet { ks: ks.to_vec(), values, trials: results.len(), n, m })
}

/// Height moments `H_k = ∫_a^b t^k ℋ(t) dt` with `ℋ` the centered, `M^{1/2}`-scaled
/// count of exponents below `t`. Each exponent contributes exactly
/// `(b^{k+1} − clamp(λ, a, b)^{k+1})/(k+1)`; centering removes the `b` term.
pub fn height_moments(results: &[ProductResult], ks: &[u32], support: (f64, f64)) -> Result<MomentSet, StatsError> {
    let (n, m) = shape(results)?;
    let (a, b) = support;
    let sm = (m as f64).sqrt();
    let mut values: Vec<Vec<f64>> = ks
        .iter()
        .map(|&k| {
            let e = (k + 1) as i32;
            results
                .iter()
                .map(|r| -sm * r.log_sv.iter().map(|x| (x / m as f64).clamp(a, b).powi(e)).sum::<f64>() / e as f64)
                .collect()
        })
        .collect();
    for series in &mut values {
        let mean = series.iter().sum::<f64>() / series.len() as f64;
        series.iter_mut().for_each(|x| *x -= mean);
    }
    Ok(MomentSet { ks: ks.to_vec(), values, trials: results.len(), n, m })
}

/// Delete-one jackknife standard error of a statistic given its
/// leave-one-out replicates.
pub fn jackknife_se<T: Real>(replicates: &[T]) -> T {
    let n = T::of_usize(replicates.len());
    let mean = replicates.iter().fold(T::zero(), |s, &x| s + x) / n;
    let ss = replicates.iter().fold(T::zero(), |s, &x| s + (x - mean) * (x - mean));
    ((n - T::one()) / n * ss).sqrt()
}

/// Mean and its standard error.
pub fn mean_estimate<T: Real>(x: &[T]) -> (T, T) {
    let n = T::of_usize(x.len());
    let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / (n - T::one());
    (mean, (var / n).sqrt())
}

fn cov_from_sums<T: Real>(n: T, sx: T, sy: T, sxy: T) -> T {
    (sxy - sx * sy / n) / (n - T::one())
}

/// Unbiased sample covariance with its jackknife standard error.
pub fn sample_covariance<T: Real>(x: &[T], y: &[T]) -> (T, T) {
    assert_eq!(x.len(), y.len());
    let n = x.len();
    let (mx, _) = mean_estimate(x);
    let (my, _) = mean_estimate(y);
    let xc: Vec<T> = x.iter().map(|&v| v - mx).collect();
    let yc: Vec<T> = y.iter().map(|&v| v - my).collect();
    let sum = |v: &[T]| v.iter().fold(T::zero(), |s, &a| s + a);
    let (sx, sy) = (sum(&xc), sum(&yc));
    let sxy = xc.iter().zip(&yc).fold(T::zero(), |s, (&a, &b)| s + a * b);
    let full = cov_from_sums(T::of_usize(n), sx, sy, sxy);
    let nm1 = T::of_usize(n - 1);
    let reps: Vec<T> = (0..n).map(|i| cov_from_sums(nm1, sx - xc[i], sy - yc[i], sxy - xc[i] * yc[i])).collect();
    (full, jackknife_se(&reps))
}

// k-statistics from power sums of centered data.
fn k_stat_from_sums<T: Real>(order: u32, n: T, s: &[T; 5]) -> T {
    let one = T::one();
    let c = T::lit;
    let (s1, s2, s3, s4) = (s[1], s[2], s[3], s[4]);
    match order {
        2 => (n * s2 - s1 * s1) / (n * (n - one)),
        3 => (c(2.0) * s1 * s1 * s1 - c(3.0) * n * s1 * s2 + n * n * s3) / (n * (n - one) * (n - c(2.0))),
        4 => {
            (-c(6.0) * s1.powi(4) + c(12.0) * n * s1 * s1 * s2
                - c(3.0) * n * (n - one) * s2 * s2
                - c(4.0) * n * (n + one) * s1 * s3
                + n * n * (n + one) * s4)
                / (n * (n - one) * (n - c(2.0)) * (n - c(3.0)))
        }
        _ => T::nan(),
    }
}

/// Unbiased k-statistic of order 2, 3 or 4 with its jackknife standard error.
pub fn k_statistic<T: Real>(x: &[T], order: u32) -> (T, T) {
    let (mean, _) = mean_estimate(x);
    let xc: Vec<T> = x.iter().map(|&v| v - mean).collect();
    let mut s = [T::zero(); 5];
    for &v in &xc {
        let mut p = T::one();
        for sr in s.iter_mut() {
            *sr += p;
            p = p * v;
        }
    }
    let n = x.len();
    let full = k_stat_from_sums(order, T::of_usize(n), &s);
    let nm1 = T::of_usize(n - 1);
    let reps: Vec<T> = xc
        .iter()
        .map(|&v| {
            let mut t = s;
            let mut p = T::one();
            for tr in t.iter_mut() {
                *tr -= p;
                p = p * v;
            }
            k_stat_from_sums(order, nm1, &t)
        })
        .collect();
    (full, jackknife_se(&reps))
}

fn need(ms: &MomentSet, needed: usize) -> Result<(), StatsError> {
    if ms.trials < needed {
        Err(StatsError::TooFewTrials { needed, got: ms.trials })
    } else {
        Ok(())
    }
}

/// Sample covariance of `p_k` and `p_l` (each multiplied by `M^{1/2}` when `sqrt_m`).
pub fn covariance_estimate(ms: &MomentSet, k: u32, l: u32, sqrt_m: bool) -> Result<Estimate, StatsError> {
    need(ms, MIN_TRIALS_COV)?;
    let (v, se) = sample_covariance(&ms.scaled(k, sqrt_m)?, &ms.scaled(l, sqrt_m)?);
    Ok(Estimate { value: v, std_error: se })
}

/// Covariance between statistic `k` of `a` and statistic `l` of `b` over the same trials.
pub fn cross_covariance_estimate(a: &MomentSet, k: u32, b: &MomentSet, l: u32, sqrt_m: bool) -> Result<Estimate, StatsError> {
    need(a, MIN_TRIALS_COV)?;
    if a.trials != b.trials {
        return Err(StatsError::MixedShapes);
    }
    let (v, se) = sample_covariance(&a.scaled(k, sqrt_m)?, &b.scaled(l, sqrt_m)?);
    Ok(Estimate { value: v, std_error: se })
}

pub fn covariance_matrix(ms: &MomentSet, ks: &[u32], sqrt_m: bool) -> Result<Vec<Vec<f64>>, StatsError> {
    ks.iter().map(|&k| ks.iter().map(|&l| covariance_estimate(ms, k, l, sqrt_m).map(|e| e.value)).collect()).collect()
}

/// Third or fourth cumulant of `p_k` (scaled by `M^{1/2}` when `sqrt_m`).
pub fn cumulant_estimate(ms: &MomentSet, k: u32, order: u32, sqrt_m: bool) -> Result<Estimate, StatsError> {
    if order != 3 && order != 4 {
        return Err(StatsError::BadOrder(order));
    }
    need(ms, MIN_TRIALS_CUMULANT)?;
    let (v, se) = k_statistic(&ms.scaled(k, sqrt_m)?, order);
    Ok(Estimate { value: v, std_error: se })
}

/// Mean of statistic `k` with its standard error.
pub fn mean_of(ms: &MomentSet, k: u32) -> Result<Estimate, StatsError> {
    if ms.trials < 2 {
        return Err(StatsError::TooFewTrials { needed: 2, got: ms.trials });
    }
    let (v, se) = mean_estimate(ms.series(k)?);
    Ok(Estimate { value: v, std_error: se })
}

/// Estimate matching a named prediction: `lln_fixed_m` and `lln_lyapunov` are
/// means of `p_k/N` (raw and Lyapunov scale), `cov_fixed_m` is `Cov(p_k, p_l)`
/// and `cov_lyapunov` is `Cov(M^{1/2}p_k(λ/M), M^{1/2}p_l(λ/M))`.
pub fn estimate_statistic(statistic: &str, k: u32, l: Option<u32>, results: &[ProductResult]) -> Result<Estimate, StatsError> {
    let (n, _) = shape(results)?;
    let l = l.unwrap_or(k);
    let per_n = |e: Estimate| Estimate { value: e.value / n as f64, std_error: e.std_error / n as f64 };
    match statistic {
        "lln_fixed_m" => mean_of(&empirical_moments(results, &[k], Scale::Raw)?, k).map(per_n),
        "lln_lyapunov" => mean_of(&empirical_moments(results, &[k], Scale::Lyapunov)?, k).map(per_n),
        "cov_fixed_m" => covariance_estimate(&empirical_moments(results, &[k, l], Scale::Raw)?, k, l, false),
        "cov_lyapunov" => covariance_estimate(&empirical_moments(results, &[k, l], Scale::Lyapunov)?, k, l, true),
        other => Err(StatsError::UnknownStatistic(other.to_string())),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatReport {
    pub statistic: String,
    pub predicted: f64,
    pub estimated: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub verdict: Verdict,
}

/// One predicted value paired with its estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub statistic: String,
    pub predicted: f64,
    pub quadrature_error: f64,
    pub estimate: Estimate,
}

/// `z = (estimate − prediction)/sqrt(SE² + qerr² + floor²)`; pass when `|z| < threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportPolicy {
    pub threshold: f64,
    pub se_floor: f64,
}

impl Default for ReportPolicy {
    fn default() -> Self {
        ReportPolicy { threshold: 3.0, se_floor: 0.0 }
    }
}

pub fn compare(items: &[Comparison], policy: ReportPolicy) -> Vec<StatReport> {
    items
        .iter()
        .map(|c| {
            let denom = (c.estimate.std_error.powi(2) + c.quadrature_error.powi(2) + policy.se_floor.powi(2)).sqrt();
            let diff = c.estimate.value - c.predicted;
            let z_score = if diff == 0.0 { 0.0 } else { diff / denom };
            let verdict = if z_score.abs() < policy.threshold { Verdict::Pass } else { Verdict::Fail };
            StatReport {
                statistic: c.statistic.clone(),
                predicted: c.predicted,
                estimated: c.estimate.value,
                std_error: c.estimate.std_error,
                z_score,
                verdict,
            }
        })
        .collect()
}

pub fn write_reports_csv<W: Write>(out: W, reports: &[StatReport]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}
