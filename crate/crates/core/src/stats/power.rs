use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;

use super::StatsError;

/// CDF of the noncentral t distribution (Lenth 1989, AS 243).
pub fn noncentral_t_cdf(t: f64, df: f64, delta: f64) -> f64 {
    let std_normal = Normal::standard();
    if delta == 0.0 {
        return StudentsT::new(0.0, 1.0, df).map(|d| d.cdf(t)).unwrap_or(f64::NAN);
    }
    if delta * delta > 1400.0 {
        // exp(-delta^2 / 2) underflows; use the normal approximation of
        // Abramowitz and Stegun 26.7.10.
        let z = (t * (1.0 - 1.0 / (4.0 * df)) - delta) / (1.0 + t * t / (2.0 * df)).sqrt();
        return std_normal.cdf(z);
    }
    let (tt, del, negdel) = if t < 0.0 { (-t, -delta, true) } else { (t, delta, false) };
    let mut tnc = 0.0;
    let x = tt * tt / (tt * tt + df);
    if x > 0.0 {
        let lambda = del * del;
        let mut p = 0.5 * (-0.5 * lambda).exp();
        let mut q = (2.0 / std::f64::consts::PI).sqrt() * p * del;
        let mut s = 0.5 - p;
        let mut a = 0.5;
        let b = 0.5 * df;
        let rxb = (1.0 - x).powf(b);
        let albeta = ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b);
        let mut xodd = beta_reg(a, b, x);
        let mut godd = 2.0 * rxb * (a * x.ln() - albeta).exp();
        let mut xeven = 1.0 - rxb;
        let mut geven = b * x * rxb;
        tnc = p * xodd + q * xeven;
        let mut en = 1.0;
        loop {
            a += 1.0;
            xodd -= godd;
            xeven -= geven;
            godd *= x * (a + b - 1.0) / a;
            geven *= x * (a + b - 0.5) / (a + 0.5);
            p *= lambda / (2.0 * en);
            q *= lambda / (2.0 * en + 1.0);
            s -= p;
            en += 1.0;
            tnc += p * xodd + q * xeven;
            let errbd = 2.0 * s * (xodd - godd);
            if errbd.abs() <= 1e-14 || en > 5000.0 {
                break;
            }
        }
    }
    tnc += std_normal.cdf(-del);
    let tnc = tnc.clamp(0.0, 1.0);
    if negdel {
        1.0 - tnc
    } else {
        tnc
    }
}

/// Welch-Satterthwaite degrees of freedom from variances and sizes.
pub fn welch_df(var1: f64, n1: f64, var2: f64, n2: f64) -> f64 {
    let a = var1 / n1;
    let b = var2 / n2;
    (a + b).powi(2) / (a * a / (n1 - 1.0) + b * b / (n2 - 1.0))
}

/// Power of the two-sided Welch test for the given population summaries and
/// group sizes.
pub fn welch_power(mu1: f64, sd1: f64, n1: usize, mu2: f64, sd2: f64, n2: usize, alpha: f64) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let se = (sd1 * sd1 / n1f + sd2 * sd2 / n2f).sqrt();
    let df = welch_df(sd1 * sd1, n1f, sd2 * sd2, n2f);
    let ncp = (mu1 - mu2) / se;
    let Ok(tdist) = StudentsT::new(0.0, 1.0, df) else {
        return f64::NAN;
    };
    let crit = tdist.inverse_cdf(1.0 - alpha / 2.0);
    let power = 1.0 - noncentral_t_cdf(crit, df, ncp) + noncentral_t_cdf(-crit, df, ncp);
    power.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerResult {
    /// Size of the group held fixed (group 1).
    pub n_control: usize,
    /// Grid of group-2 sizes.
    pub n_patient: Vec<usize>,
    pub power: Vec<f64>,
    /// Smallest grid size reaching the target power, if any.
    pub required_n_patient: Option<usize>,
    /// Equal-allocation size per group reaching the target power.
    pub required_n_per_group: Option<usize>,
    pub detectable_difference: f64,
}

fn check_sds(sd1: f64, sd2: f64) -> Result<(), StatsError> {
    if !(sd1 > 0.0 && sd2 > 0.0) || !sd1.is_finite() || !sd2.is_finite() {
        return Err(StatsError::Degenerate("standard deviations must be > 0".into()));
    }
    Ok(())
}

/// Power over a grid of group-2 sizes with the size of group 1 held fixed.
#[allow(clippy::too_many_arguments)]
pub fn power_curve(
    mu1: f64,
    sd1: f64,
    n1_fixed: usize,
    mu2: f64,
    sd2: f64,
    n2_grid: &[usize],
    alpha: f64,
    target: f64,
) -> Result<PowerResult, StatsError> {
    check_sds(sd1, sd2)?;
    if n1_fixed < 2 || n2_grid.iter().any(|&n| n < 2) {
        return Err(StatsError::InsufficientData("group sizes must be >= 2".into()));
    }
    let power: Vec<f64> = n2_grid
        .iter()
        .map(|&n| welch_power(mu1, sd1, n1_fixed, mu2, sd2, n, alpha))
        .collect();
    let required_n_patient = n2_grid
        .iter()
        .zip(&power)
        .find(|(_, &p)| p >= target)
        .map(|(&n, _)| n);
    let required_n_per_group = if mu1 != mu2 {
        required_n(mu1, sd1, mu2, sd2, target, alpha).ok()
    } else {
        None
    };
    Ok(PowerResult {
        n_control: n1_fixed,
        n_patient: n2_grid.to_vec(),
        power,
        required_n_patient,
        required_n_per_group,
        detectable_difference: (mu1 - mu2).abs(),
    })
}

/// Smallest equal group size whose two-sided Welch power reaches `power`.
pub fn required_n(mu1: f64, sd1: f64, mu2: f64, sd2: f64, power: f64, alpha: f64) -> Result<usize, StatsError> {
    check_sds(sd1, sd2)?;
    if mu1 == mu2 {
        return Err(StatsError::UnattainablePower);
    }
    if !(0.0 < power && power < 1.0) || !(0.0 < alpha && alpha < 1.0) {
        return Err(StatsError::Degenerate("power and alpha must lie in (0, 1)".into()));
    }
    const LIMIT: usize = 1_000_000;
    let at = |n: usize| welch_power(mu1, sd1, n, mu2, sd2, n, alpha);
    // Exponential search then bisection; power is increasing in n.
    let mut hi = 2;
    while at(hi) < power {
        if hi >= LIMIT {
            return Err(StatsError::UnattainablePower);
        }
        hi = (hi * 2).min(LIMIT);
    }
    let mut lo = 1;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if mid >= 2 && at(mid) >= power {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nct_reduces_to_central() {
        let t = StudentsT::new(0.0, 1.0, 7.0).unwrap();
        for x in [-2.0, -0.5, 0.0, 1.3, 3.0] {
            assert!((noncentral_t_cdf(x, 7.0, 1e-300) - t.cdf(x)).abs() < 1e-10);
        }
    }

    #[test]
    fn nct_symmetry() {
        let a = noncentral_t_cdf(1.2, 9.5, 0.8);
        let b = noncentral_t_cdf(-1.2, 9.5, -0.8);
        assert!((a - (1.0 - b)).abs() < 1e-12);
    }

    #[test]
    fn null_power_is_alpha() {
        for n in [3, 10, 50] {
            let p = welch_power(10.0, 2.0, n, 10.0, 3.0, 12, 0.05);
            assert!((p - 0.05).abs() < 1e-9);
        }
    }

    #[test]
    fn large_n_power_tends_to_one() {
        assert!(welch_power(43.33, 11.22, 5000, 32.45, 10.66, 5000, 0.05) > 0.999999);
    }

    #[test]
    fn required_n_rejects_equal_means() {
        assert_eq!(required_n(1.0, 1.0, 1.0, 1.0, 0.8, 0.05), Err(StatsError::UnattainablePower));
    }
}
