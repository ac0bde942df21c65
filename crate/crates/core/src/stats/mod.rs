//! Descriptive statistics, normality screening, two-group tests and power.

mod power;
mod shapiro;

pub use power::{noncentral_t_cdf, power_curve, required_n, welch_df, welch_power, PowerResult};
pub use shapiro::shapiro_wilk;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("degenerate sample: {0}")]
    Degenerate(String),
    #[error("unsupported sample size {0} (Shapiro-Wilk needs 3..=5000)")]
    UnsupportedSize(usize),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("sample contains non-finite values")]
    NonFinite,
    #[error("target power cannot be reached (equal means)")]
    UnattainablePower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    /// Shapiro-Wilk p >= 0.05. False when the test cannot run.
    pub is_normal: bool,
    pub shapiro_p: Option<f64>,
}

/// Sample mean and SD (n - 1 denominator) with a normality screen.
pub fn describe(values: &[f64]) -> GroupSummary {
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    let sd = if n < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    };
    let shapiro_p = shapiro_wilk(values).ok().map(|(_, p)| p);
    GroupSummary {
        n,
        mean,
        sd,
        is_normal: shapiro_p.is_some_and(|p| p >= 0.05),
        shapiro_p,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    WelchT,
    MannWhitney,
}

impl TestKind {
    pub fn label(self) -> &'static str {
        match self {
            TestKind::WelchT => "welch_t",
            TestKind::MannWhitney => "mann_whitney",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test_kind: TestKind,
    pub statistic: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub df: Option<f64>,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch (unequal variance) t-test.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(StatsError::InsufficientData("each group needs at least 2 values".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::Degenerate("both groups have zero variance".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se = (va / na + vb / nb).sqrt();
    let t = (ma - mb) / se;
    let df = welch_df(va, na, vb, nb);
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| StatsError::Degenerate(e.to_string()))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(TestResult {
        test_kind: TestKind::WelchT,
        statistic: t,
        df: Some(df),
        p_value: p,
    })
}

/// Midranks (1-based) of the pooled sample.
fn midranks(pooled: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pooled.len()).collect();
    order.sort_by(|&i, &j| pooled[i].total_cmp(&pooled[j]));
    let mut ranks = vec![0.0; pooled.len()];
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
        i = j + 1;
    }
    ranks
}

/// Largest n_a * n_b for which the exact null distribution is enumerated.
pub const MANN_WHITNEY_EXACT_LIMIT: usize = 400;

/// Two-sided Mann-Whitney U test. The statistic is U for group `a`.
///
/// Exact p-values come from the permutation distribution of the doubled rank
/// sum (ties handled exactly) when `n_a * n_b <= 400`; otherwise a
/// tie-corrected normal approximation with continuity correction is used.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<TestResult, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::InsufficientData("each group needs at least 1 value".into()));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(StatsError::NonFinite);
    }
    let (na, nb) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let rank_sum_a: f64 = ranks[..na].iter().sum();
    let u = rank_sum_a - (na * (na + 1)) as f64 / 2.0;

    let p = if na * nb <= MANN_WHITNEY_EXACT_LIMIT {
        exact_p(&ranks, na, rank_sum_a)
    } else {
        normal_p(&ranks, na, nb, u)
    };
    Ok(TestResult {
        test_kind: TestKind::MannWhitney,
        statistic: u,
        df: None,
        p_value: p,
    })
}

fn exact_p(ranks: &[f64], na: usize, rank_sum_a: f64) -> f64 {
    // Doubled midranks are integers.
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = {
        let mut d = doubled.clone();
        d.sort_unstable_by(|x, y| y.cmp(x));
        d[..na].iter().sum()
    };
    // counts[k][s]: number of k-subsets with doubled rank sum s.
    let mut counts = vec![vec![0.0f64; max_sum + 1]; na + 1];
    counts[0][0] = 1.0;
    for &r in &doubled {
        for k in (1..=na).rev() {
            let (lower, upper) = counts.split_at_mut(k);
            let prev = &lower[k - 1];
            let cur = &mut upper[0];
            for s in (r..=max_sum).rev() {
                if prev[s - r] != 0.0 {
                    cur[s] += prev[s - r];
                }
            }
        }
    }
    let dist = &counts[na];
    let total: f64 = dist.iter().sum();
    let observed = (2.0 * rank_sum_a).round() as usize;
    let lower: f64 = dist[..=observed.min(max_sum)].iter().sum();
    let upper: f64 = if observed <= max_sum { dist[observed..].iter().sum() } else { 0.0 };
    (2.0 * lower.min(upper) / total).min(1.0)
}

fn normal_p(ranks: &[f64], na: usize, nb: usize, u: f64) -> f64 {
    let n = (na + nb) as f64;
    let mut sorted: Vec<f64> = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (naf, nbf) = (na as f64, nb as f64);
    let mu = naf * nbf / 2.0;
    let var = naf * nbf / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
    (2.0 * Normal::standard().cdf(-z)).min(1.0)
}

/// Mann-Whitney when either group fails the Shapiro-Wilk screen at `alpha`
/// (or cannot be screened), Welch's t-test otherwise.
pub fn choose_and_test(a: &[f64], b: &[f64], alpha: f64) -> Result<TestResult, StatsError> {
    let normal = |x: &[f64]| shapiro_wilk(x).map(|(_, p)| p >= alpha).unwrap_or(false);
    if normal(a) && normal(b) {
        welch_t(a, b)
    } else {
        mann_whitney(a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn describe_basic() {
        let s = describe(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(s.n, 4);
        assert!((s.mean - 2.5).abs() < 1e-12);
        assert!((s.sd - 1.2909944487358056).abs() < 1e-12);
        let s = describe(&[1.0]);
        assert_eq!(s.sd, 0.0);
        assert!(!s.is_normal);
    }

    #[test]
    fn welch_identical_groups() {
        let a = [1.0, 2.0, 4.0, 7.0];
        let r = welch_t(&a, &a).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_degenerate() {
        assert!(matches!(welch_t(&[1.0, 1.0], &[2.0, 2.0]), Err(StatsError::Degenerate(_))));
        assert!(welch_t(&[1.0], &[2.0, 3.0]).is_err());
    }

    #[test]
    fn mann_whitney_separation_and_symmetry() {
        let r = mann_whitney(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(r.statistic, 0.0);
        assert!((r.p_value - 0.1).abs() < 1e-12);

        let a = [3.0, 1.0, 4.0, 1.5, 9.0];
        let r = mann_whitney(&a, &a).unwrap();
        assert_eq!(r.statistic, 12.5);
        assert!(r.p_value > 0.99);
    }

    #[test]
    fn mann_whitney_large_uses_normal_path() {
        let a: Vec<f64> = (0..30).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..30).map(|i| i as f64 + 0.5).collect();
        let r = mann_whitney(&a, &b).unwrap();
        assert!(r.p_value > 0.5 && r.p_value <= 1.0);
    }

    #[test]
    fn midranks_with_ties() {
        assert_eq!(midranks(&[2.0, 1.0, 2.0, 3.0]), vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn choose_small_groups_runs() {
        let r = choose_and_test(&[1.0, 2.0, 3.5], &[2.0, 4.0, 5.0], 0.05).unwrap();
        assert!((0.0..=1.0).contains(&r.p_value));
    }
}
