//! Monoexponential fits of exercise and recovery phases, plus the oxidative
//! markers derived from them.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metabolite::Metabolite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KineticsError {
    #[error("need at least 4 points from start index {start_index}, have {available}")]
    TooFewPoints { start_index: usize, available: usize },
    #[error("times must be strictly increasing and finite")]
    InvalidTimes,
    #[error("values must be finite and match times in length")]
    InvalidValues,
    #[error("series is constant; nothing to fit")]
    DegenerateSeries,
    #[error("fit did not converge after {iterations} iterations (tau {tau:.3}, ssr {ss_res:.3e})")]
    FitFailure {
        iterations: usize,
        tau: f64,
        ss_res: f64,
    },
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Exercise,
    Recovery,
}

/// Result of a monoexponential fit.
///
/// Recovery: `v(t) = asymptote - delta * exp(-(t - t0) / tau)`.
/// Exercise: `v(t) = asymptote + delta * exp(-(t - t0) / tau)`.
/// `delta` is signed, so falling recovery (Pi) and rising exercise (Pi) series
/// carry a negative delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KineticFit {
    pub metabolite: Metabolite,
    pub phase: Phase,
    pub tau: f64,
    pub delta: f64,
    pub asymptote: f64,
    pub start_index: usize,
    pub t0: f64,
    pub r2: f64,
    pub cv_tau_pct: f64,
    pub n_points: usize,
    pub ss_res: f64,
}

impl KineticFit {
    fn amplitude_coefficient(&self) -> f64 {
        match self.phase {
            Phase::Recovery => -self.delta,
            Phase::Exercise => self.delta,
        }
    }

    pub fn predict(&self, t: f64) -> f64 {
        self.asymptote + self.amplitude_coefficient() * (-(t - self.t0) / self.tau).exp()
    }

    /// Residuals (observed - model) over the fitted range.
    pub fn residuals(&self, times: &[f64], values: &[f64]) -> Vec<f64> {
        times[self.start_index..]
            .iter()
            .zip(&values[self.start_index..])
            .map(|(&t, &v)| v - self.predict(t))
            .collect()
    }

    /// Residuals divided by the fit's residual standard error. Zero when the
    /// fit is exact.
    pub fn standardized_residuals(&self, times: &[f64], values: &[f64]) -> Vec<f64> {
        let res = self.residuals(times, values);
        let dof = res.len().saturating_sub(3).max(1) as f64;
        let scale = (self.ss_res / dof).sqrt();
        let tiny = 1e-12 * values[self.start_index..].iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
        if scale <= tiny {
            return vec![0.0; res.len()];
        }
        res.into_iter().map(|r| r / scale).collect()
    }
}

/// Model `a + b * exp(-s / tau)` with `s = t - t0`, parameterized by
/// `(a, b, ln tau)`.
struct Problem<'a> {
    s: Vec<f64>,
    v: &'a [f64],
}

impl Problem<'_> {
    fn ssr(&self, p: &Vector3<f64>) -> f64 {
        let tau = p[2].exp();
        self.s
            .iter()
            .zip(self.v)
            .map(|(&s, &v)| {
                let r = v - (p[0] + p[1] * (-s / tau).exp());
                r * r
            })
            .sum()
    }

    /// Linear least squares for (a, b) at fixed tau; returns (a, b, ssr).
    fn profile(&self, tau: f64) -> (f64, f64, f64) {
        let n = self.s.len() as f64;
        let (mut se, mut see, mut sv, mut sev) = (0.0, 0.0, 0.0, 0.0);
        for (&s, &v) in self.s.iter().zip(self.v) {
            let e = (-s / tau).exp();
            se += e;
            see += e * e;
            sv += v;
            sev += e * v;
        }
        let det = n * see - se * se;
        if det.abs() <= 1e-14 * n * see.max(1e-300) {
            let a = sv / n;
            let p = Vector3::new(a, 0.0, tau.ln());
            return (a, 0.0, self.ssr(&p));
        }
        let b = (n * sev - se * sv) / det;
        let a = (sv - b * se) / n;
        let p = Vector3::new(a, b, tau.ln());
        (a, b, self.ssr(&p))
    }

    fn jtj_jtr(&self, p: &Vector3<f64>) -> (Matrix3<f64>, Vector3<f64>) {
        let tau = p[2].exp();
        let mut jtj = Matrix3::zeros();
        let mut jtr = Vector3::zeros();
        for (&s, &v) in self.s.iter().zip(self.v) {
            let e = (-s / tau).exp();
            let model = p[0] + p[1] * e;
            // d/d(ln tau) of b*exp(-s/tau) = b*e*s/tau
            let j = Vector3::new(1.0, e, p[1] * e * s / tau);
            jtj += j * j.transpose();
            jtr += j * (v - model);
        }
        (jtj, jtr)
    }
}

struct Solution {
    params: Vector3<f64>,
    ssr: f64,
    converged: bool,
    iterations: usize,
}

const MAX_ITER: usize = 500;

fn levenberg_marquardt(prob: &Problem, start: Vector3<f64>, bounds: (f64, f64), ss_tot: f64) -> Solution {
    let mut p = start;
    p[2] = p[2].clamp(bounds.0, bounds.1);
    let mut ssr = prob.ssr(&p);
    let mut lambda = 1e-3;
    let floor = 1e-28 * ss_tot;
    for iter in 1..=MAX_ITER {
        if ssr <= floor {
            return Solution { params: p, ssr, converged: true, iterations: iter - 1 };
        }
        let (jtj, jtr) = prob.jtj_jtr(&p);
        let mut accepted = false;
        while lambda < 1e20 {
            let mut damped = jtj;
            for d in 0..3 {
                damped[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&jtr)) else {
                lambda *= 10.0;
                continue;
            };
            let mut trial = p + step;
            trial[2] = trial[2].clamp(bounds.0, bounds.1);
            let trial_ssr = prob.ssr(&trial);
            if trial_ssr < ssr {
                let rel = (ssr - trial_ssr) / ssr;
                let small_step = (trial - p).abs().max() < 1e-13 * (1.0 + p.abs().max());
                p = trial;
                ssr = trial_ssr;
                lambda = (lambda / 10.0).max(1e-15);
                accepted = true;
                if rel < 1e-15 || small_step {
                    return Solution { params: p, ssr, converged: true, iterations: iter };
                }
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            return Solution { params: p, ssr, converged: true, iterations: iter };
        }
    }
    Solution { params: p, ssr, converged: false, iterations: MAX_ITER }
}

/// Log-linear initial guess: asymptote from the tail mean, tau from regressing
/// ln|v - asymptote| on time over points well clear of the asymptote.
fn log_linear_guess(s: &[f64], v: &[f64]) -> Option<f64> {
    let n = v.len();
    let tail = n.min(5);
    let asym = v[n - tail..].iter().sum::<f64>() / tail as f64;
    let gap0 = v[0] - asym;
    if gap0 == 0.0 {
        return None;
    }
    let cutoff = 0.1 * gap0.abs();
    let pts: Vec<(f64, f64)> = s
        .iter()
        .zip(v)
        .filter(|(_, &x)| (x - asym) * gap0.signum() > cutoff)
        .map(|(&t, &x)| (t, ((x - asym) * gap0.signum()).ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -1.0 / slope)
}

fn fit_model(
    metabolite: Metabolite,
    phase: Phase,
    times: &[f64],
    values: &[f64],
    start_index: usize,
) -> Result<KineticFit, KineticsError> {
    if times.len() != values.len() || values.iter().any(|v| !v.is_finite()) {
        return Err(KineticsError::InvalidValues);
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(KineticsError::InvalidTimes);
    }
    let available = times.len().saturating_sub(start_index);
    if available < 4 {
        return Err(KineticsError::TooFewPoints { start_index, available });
    }
    let t0 = times[start_index];
    let v = &values[start_index..];
    let s: Vec<f64> = times[start_index..].iter().map(|t| t - t0).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let ss_tot: f64 = v.iter().map(|x| (x - mean).powi(2)).sum();
    let scale = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if ss_tot <= (1e-14 * scale).powi(2) * v.len() as f64 {
        return Err(KineticsError::DegenerateSeries);
    }

    let span = s[s.len() - 1];
    let min_dt = s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let bounds = ((1e-3 * min_dt).ln(), (1e3 * span).ln());
    let prob = Problem { s, v };

    // Candidate starts: the log-linear guess and the best point on a grid of
    // profiled tau values.
    let mut starts = Vec::new();
    if let Some(tau) = log_linear_guess(&prob.s, v) {
        let tau = tau.clamp(bounds.0.exp(), bounds.1.exp());
        let (a, b, _) = prob.profile(tau);
        starts.push(Vector3::new(a, b, tau.ln()));
    }
    let grid = 120;
    let mut best_grid = (f64::INFINITY, Vector3::zeros());
    for k in 0..=grid {
        let ln_tau = bounds.0 + (bounds.1 - bounds.0) * k as f64 / grid as f64;
        let (a, b, ssr) = prob.profile(ln_tau.exp());
        if ssr < best_grid.0 {
            best_grid = (ssr, Vector3::new(a, b, ln_tau));
        }
    }
    starts.push(best_grid.1);

    let mut best: Option<Solution> = None;
    for start in starts {
        let sol = levenberg_marquardt(&prob, start, bounds, ss_tot);
        let better = match &best {
            None => true,
            Some(b) => (sol.converged && !b.converged) || (sol.converged == b.converged && sol.ssr < b.ssr),
        };
        if better {
            best = Some(sol);
        }
    }
    let sol = best.expect("at least one start");
    let tau = sol.params[2].exp();
    if !sol.converged {
        return Err(KineticsError::FitFailure {
            iterations: sol.iterations,
            tau,
            ss_res: sol.ssr,
        });
    }

    let n = prob.s.len();
    let (jtj, _) = prob.jtj_jtr(&sol.params);
    let cv_tau_pct = if n > 3 {
        let sigma2 = sol.ssr / (n - 3) as f64;
        match jtj.try_inverse() {
            // ln-tau parameterization: SE(tau)/tau = SE(ln tau)
            Some(inv) => 100.0 * (inv[(2, 2)] * sigma2).max(0.0).sqrt(),
            None => f64::INFINITY,
        }
    } else {
        0.0
    };
    let b = sol.params[1];
    let delta = match phase {
        Phase::Recovery => -b,
        Phase::Exercise => b,
    };
    Ok(KineticFit {
        metabolite,
        phase,
        tau,
        delta,
        asymptote: sol.params[0],
        start_index,
        t0,
        r2: (1.0 - sol.ssr / ss_tot).clamp(0.0, 1.0),
        cv_tau_pct,
        n_points: n,
        ss_res: sol.ssr,
    })
}

/// Fits `v(t) = asymptote - delta * exp(-(t - t0)/tau)` to the points from
/// `start_index` on, with `t0 = times[start_index]`.
pub fn fit_recovery(
    metabolite: Metabolite,
    times: &[f64],
    values: &[f64],
    start_index: usize,
) -> Result<KineticFit, KineticsError> {
    fit_model(metabolite, Phase::Recovery, times, values, start_index)
}

/// Fits `v(t) = asymptote + delta * exp(-(t - t0)/tau)`; PCr depletion gives
/// a positive delta, Pi accumulation a negative one.
pub fn fit_exercise(
    metabolite: Metabolite,
    times: &[f64],
    values: &[f64],
    start_index: usize,
) -> Result<KineticFit, KineticsError> {
    fit_model(metabolite, Phase::Exercise, times, values, start_index)
}

/// Initial PCr resynthesis rate (mM/s).
pub fn vi_pcr(delta_pcr_mm: f64, tau_rec_s: f64) -> Result<f64, KineticsError> {
    if !(tau_rec_s > 0.0) {
        return Err(KineticsError::Domain(format!("tau must be > 0, got {tau_rec_s}")));
    }
    Ok(delta_pcr_mm / tau_rec_s)
}

/// Maximal oxidative rate from the ADP-control model (mM/s).
pub fn vmax(vi: f64, adp_end_um: f64, km_um: f64) -> Result<f64, KineticsError> {
    if !(adp_end_um > 0.0) {
        return Err(KineticsError::Domain(format!("ADP must be > 0, got {adp_end_um}")));
    }
    if !(km_um >= 0.0) {
        return Err(KineticsError::Domain(format!("Km must be >= 0, got {km_um}")));
    }
    Ok(vi * (1.0 + km_um / adp_end_um))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OxidativeMarkers {
    pub vi_pcr: f64,
    pub vmax: f64,
    pub adp_end: f64,
    pub km: f64,
}

impl OxidativeMarkers {
    pub fn compute(delta_pcr_mm: f64, tau_rec_s: f64, adp_end_um: f64, km_um: f64) -> Result<Self, KineticsError> {
        let vi = vi_pcr(delta_pcr_mm, tau_rec_s)?;
        Ok(OxidativeMarkers {
            vi_pcr: vi,
            vmax: vmax(vi, adp_end_um, km_um)?,
            adp_end: adp_end_um,
            km: km_um,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn series(n: usize, dt: f64, f: impl Fn(f64) -> f64) -> (Vec<f64>, Vec<f64>) {
        let t: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
        let v = t.iter().map(|&x| f(x)).collect();
        (t, v)
    }

    #[test]
    fn noiseless_recovery() {
        let (t, v) = series(90, 4.0, |x| 33.0 - 13.0 * (-x / 40.0).exp());
        let fit = fit_recovery(Metabolite::PCr, &t, &v, 0).unwrap();
        assert!((fit.tau - 40.0).abs() / 40.0 < 1e-6);
        assert!((fit.delta - 13.0).abs() < 1e-6);
        assert!((fit.asymptote - 33.0).abs() < 1e-6);
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(fit.cv_tau_pct < 1e-6);
    }

    #[test]
    fn constant_series_is_degenerate() {
        let (t, v) = series(20, 4.0, |_| 5.0);
        assert_eq!(fit_recovery(Metabolite::PCr, &t, &v, 0), Err(KineticsError::DegenerateSeries));
    }

    #[test]
    fn too_few_points() {
        let (t, v) = series(6, 4.0, |x| x);
        assert!(matches!(
            fit_recovery(Metabolite::PCr, &t, &v, 3),
            Err(KineticsError::TooFewPoints { available: 3, .. })
        ));
    }

    #[test]
    fn exercise_pcr_and_pi() {
        let (t, v) = series(30, 4.0, |x| 20.0 + 13.0 * (-x / 34.0).exp());
        let fit = fit_exercise(Metabolite::PCr, &t, &v, 0).unwrap();
        assert!((fit.tau - 34.0).abs() / 34.0 < 1e-6);
        assert_eq!(fit.n_points, 30);
        assert!(fit.delta > 0.0);

        let (t, v) = series(30, 4.0, |x| 18.0 - 13.0 * (-x / 28.0).exp());
        let fit = fit_exercise(Metabolite::Pi, &t, &v, 0).unwrap();
        assert!((fit.tau - 28.0).abs() / 28.0 < 1e-6);
        assert!(fit.delta < 0.0);
    }

    #[test]
    fn rising_pcr_during_exercise_still_returns() {
        let (t, v) = series(30, 4.0, |x| 20.0 + 0.1 * x);
        let fit = fit_exercise(Metabolite::PCr, &t, &v, 0).unwrap();
        assert!(fit.r2 >= 0.0 && fit.r2 <= 1.0);
    }

    #[test]
    fn dropping_first_point_keeps_tau() {
        let (t, v) = series(90, 4.0, |x| 30.0 - 12.0 * (-x / 33.11).exp());
        let a = fit_recovery(Metabolite::PCr, &t, &v, 0).unwrap();
        let b = fit_recovery(Metabolite::PCr, &t, &v, 1).unwrap();
        assert!((a.tau - b.tau).abs() / a.tau < 1e-6);
        assert_eq!(b.n_points, 89);
    }

    #[test]
    fn vi_and_vmax() {
        assert!((vi_pcr(13.05, 43.33).unwrap() - 0.3012).abs() < 1e-4);
        assert!((vi_pcr(14.73, 32.45).unwrap() - 0.4539).abs() < 1e-4);
        assert_eq!(vi_pcr(0.0, 20.0).unwrap(), 0.0);
        assert!((vmax(0.30, 55.0, 30.0).unwrap() - 0.463636).abs() < 1e-5);
        assert_eq!(vmax(0.3, 30.0, 30.0).unwrap(), 0.6);
        assert!((vmax(0.3, 30.0, 1e-12).unwrap() - 0.3).abs() < 1e-12);
        assert!(vmax(0.3, 0.0, 30.0).is_err());
        assert!(vi_pcr(1.0, 0.0).is_err());
    }

    #[test]
    fn standardized_residuals_flag_spike() {
        let (t, mut v) = series(40, 4.0, |x| 30.0 - 12.0 * (-x / 33.0).exp());
        for (k, x) in v.iter_mut().enumerate() {
            *x += 0.05 * ((k * 7919 % 13) as f64 - 6.0) / 6.0;
        }
        v[20] += 3.0;
        let fit = fit_recovery(Metabolite::PCr, &t, &v, 0).unwrap();
        let z = fit.standardized_residuals(&t, &v);
        let flagged: Vec<usize> = z.iter().enumerate().filter(|(_, z)| z.abs() > 3.0).map(|(i, _)| i).collect();
        assert_eq!(flagged, vec![20]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn affine_and_translation_invariance(
            tau in 10.0f64..80.0,
            a in 0.2f64..5.0,
            b in -50.0f64..50.0,
            shift in -1000.0f64..1000.0,
        ) {
            let (t, v) = series(60, 4.0, |x| {
                30.0 - 12.0 * (-x / tau).exp() + 0.2 * (x * 0.37).sin()
            });
            let base = fit_recovery(Metabolite::PCr, &t, &v, 0).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| a * x + b).collect();
            let sf = fit_recovery(Metabolite::PCr, &t, &scaled, 0).unwrap();
            prop_assert!((sf.tau - base.tau).abs() <= 1e-8 * base.tau);
            prop_assert!((sf.r2 - base.r2).abs() <= 1e-9);
            prop_assert!((sf.delta - a * base.delta).abs() <= 1e-6 * a * base.delta.abs().max(1.0));
            prop_assert!((sf.asymptote - (a * base.asymptote + b)).abs() <= 1e-6 * (a * base.asymptote + b).abs().max(1.0));

            let shifted: Vec<f64> = t.iter().map(|x| x + shift).collect();
            let tf = fit_recovery(Metabolite::PCr, &shifted, &v, 0).unwrap();
            prop_assert!((tf.tau - base.tau).abs() <= 1e-8 * base.tau);
        }

        #[test]
        fn vmax_ratio_exact(vi in 0.01f64..2.0, adp in 1.0f64..200.0, km in 0.0f64..100.0) {
            let v = vmax(vi, adp, km).unwrap();
            prop_assert!(v >= vi);
            prop_assert!((v / vi - (1.0 + km / adp)).abs() < 1e-12);
        }
    }
}
