//! T1 estimation from resting long/short TR acquisitions and saturation
//! correction factors `R = 1 / (1 - exp(-TR / T1))`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metabolite::{Metabolite, PerMetabolite};

const T1_LOWER_S: f64 = 0.1;
const T1_UPPER_S: f64 = 60.0;
const T1_TOLERANCE_S: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxError {
    #[error("unphysical saturation for {metabolite}: short/long amplitude ratio {ratio} must lie in (0, 1)")]
    UnphysicalSaturation { metabolite: Metabolite, ratio: f64 },
    #[error("no T1 in ({lower} s, {upper} s) explains the {metabolite} saturation ratio {ratio}")]
    OutOfRange {
        metabolite: Metabolite,
        ratio: f64,
        lower: f64,
        upper: f64,
    },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("configuration error: {0}")]
    Configuration(String),
}

/// Where a set of T1 values came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T1Source {
    Individual,
    Fixed,
    CohortMean,
}

/// How the dynamic amplitudes are corrected for saturation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum T1Mode {
    #[default]
    Individual,
    Fixed,
    CohortMean,
}

impl T1Mode {
    pub const ALL: [T1Mode; 3] = [T1Mode::Individual, T1Mode::Fixed, T1Mode::CohortMean];

    pub fn label(self) -> &'static str {
        match self {
            T1Mode::Individual => "individual",
            T1Mode::Fixed => "fixed",
            T1Mode::CohortMean => "cohort_mean",
        }
    }
}

impl std::str::FromStr for T1Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "individual" => Ok(T1Mode::Individual),
            "fixed" => Ok(T1Mode::Fixed),
            "cohort_mean" => Ok(T1Mode::CohortMean),
            other => Err(format!("unknown T1 mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct T1Panel {
    pub t1: PerMetabolite<f64>,
    pub std_error: PerMetabolite<f64>,
    pub source: T1Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionPanel {
    pub r: PerMetabolite<f64>,
    pub tr: f64,
    pub t1_panel: T1Panel,
}

/// Literature T1 values (seconds) used when individual estimates are not applied.
pub fn default_fixed_t1() -> PerMetabolite<f64> {
    PerMetabolite {
        pcr: 6.60,
        pi: 6.10,
        gatp: 5.00,
        aatp: 3.00,
        batp: 3.70,
    }
}

/// Saturation factor `1 - exp(-tr / t1)`, the fraction of relaxed signal seen at `tr`.
pub fn saturation_fraction(t1: f64, tr: f64) -> f64 {
    -(-tr / t1).exp_m1()
}

pub fn correction_factor(t1: f64, tr: f64) -> Result<f64, RelaxError> {
    if !(t1 > 0.0 && t1.is_finite()) || !(tr > 0.0 && tr.is_finite()) {
        return Err(RelaxError::Domain(format!(
            "correction factor needs t1 > 0 and tr > 0, got t1={t1}, tr={tr}"
        )));
    }
    Ok(1.0 / saturation_fraction(t1, tr))
}

pub fn apply_correction(amplitude: f64, r: f64) -> Result<f64, RelaxError> {
    if !(r >= 1.0) {
        return Err(RelaxError::Domain(format!(
            "correction factor must be >= 1, got {r}"
        )));
    }
    Ok(amplitude * r)
}

/// Expected short/long amplitude ratio for a given T1.
fn saturation_ratio(t1: f64, tr_short: f64, tr_long: f64) -> f64 {
    saturation_fraction(t1, tr_short) / saturation_fraction(t1, tr_long)
}

fn saturation_ratio_derivative(t1: f64, tr_short: f64, tr_long: f64) -> f64 {
    let n = saturation_fraction(t1, tr_short);
    let d = saturation_fraction(t1, tr_long);
    let dn = -(tr_short / (t1 * t1)) * (-tr_short / t1).exp();
    let dd = -(tr_long / (t1 * t1)) * (-tr_long / t1).exp();
    (dn * d - n * dd) / (d * d)
}

/// Solves the two-point saturation model for T1 by safeguarded Newton iteration.
fn solve_t1(
    metabolite: Metabolite,
    ratio: f64,
    tr_short: f64,
    tr_long: f64,
) -> Result<f64, RelaxError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(RelaxError::UnphysicalSaturation { metabolite, ratio });
    }
    // The ratio decreases monotonically from 1 (T1 -> 0) to tr_short/tr_long (T1 -> inf).
    let g = |t1: f64| saturation_ratio(t1, tr_short, tr_long) - ratio;
    let mut lo = T1_LOWER_S;
    let mut hi = T1_UPPER_S;
    let (g_lo, g_hi) = (g(lo), g(hi));
    if g_lo < 0.0 || g_hi > 0.0 {
        return Err(RelaxError::OutOfRange {
            metabolite,
            ratio,
            lower: T1_LOWER_S,
            upper: T1_UPPER_S,
        });
    }

    let mut t1 = 0.5 * (lo + hi);
    for _ in 0..200 {
        let value = g(t1);
        if value > 0.0 {
            lo = t1;
        } else {
            hi = t1;
        }
        let slope = saturation_ratio_derivative(t1, tr_short, tr_long);
        let newton = t1 - value / slope;
        let next = if slope.is_finite() && slope != 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        let step = (next - t1).abs();
        t1 = next;
        if step < T1_TOLERANCE_S || hi - lo < T1_TOLERANCE_S {
            break;
        }
    }
    Ok(t1)
}

/// Estimates per-metabolite T1 from averaged resting amplitudes at two TRs.
pub fn estimate_t1(
    amp_long: &PerMetabolite<f64>,
    amp_short: &PerMetabolite<f64>,
    tr_long: f64,
    tr_short: f64,
) -> Result<T1Panel, RelaxError> {
    estimate_t1_with_errors(amp_long, amp_short, None, tr_long, tr_short)
}

/// As [`estimate_t1`], propagating standard errors of the two amplitudes
/// (`(se_long, se_short)`) through the saturation model to the T1 estimate.
pub fn estimate_t1_with_errors(
    amp_long: &PerMetabolite<f64>,
    amp_short: &PerMetabolite<f64>,
    amp_errors: Option<(&PerMetabolite<f64>, &PerMetabolite<f64>)>,
    tr_long: f64,
    tr_short: f64,
) -> Result<T1Panel, RelaxError> {
    if !(tr_short > 0.0 && tr_long > tr_short) {
        return Err(RelaxError::Domain(format!(
            "need tr_long > tr_short > 0, got tr_long={tr_long}, tr_short={tr_short}"
        )));
    }
    let mut t1 = PerMetabolite::splat(0.0);
    let mut std_error = PerMetabolite::splat(0.0);
    for m in Metabolite::ALL {
        let (long, short) = (amp_long[m], amp_short[m]);
        if !(long > 0.0) {
            return Err(RelaxError::UnphysicalSaturation {
                metabolite: m,
                ratio: short / long,
            });
        }
        let ratio = short / long;
        let value = solve_t1(m, ratio, tr_short, tr_long)?;
        t1[m] = value;
        if let Some((se_long, se_short)) = amp_errors {
            let rel = (se_long[m] / long).powi(2) + (se_short[m] / short).powi(2);
            let ratio_se = ratio * rel.sqrt();
            let slope = saturation_ratio_derivative(value, tr_short, tr_long).abs();
            std_error[m] = if slope > 0.0 { ratio_se / slope } else { f64::INFINITY };
        }
    }
    Ok(T1Panel {
        t1,
        std_error,
        source: T1Source::Individual,
    })
}

fn panel_from_t1(t1_panel: T1Panel, tr: f64) -> Result<CorrectionPanel, RelaxError> {
    let r = t1_panel.t1.try_map(|_, &t1| correction_factor(t1, tr))?;
    Ok(CorrectionPanel { r, tr, t1_panel })
}

/// Builds the correction panel for the requested mode.
///
/// `cohort` supplies the individual panels averaged in `cohort_mean` mode; the
/// reported standard error is then the standard error of that mean.
pub fn build_panel(
    mode: T1Mode,
    individual: Option<&T1Panel>,
    fixed_table: &PerMetabolite<f64>,
    cohort: Option<&[T1Panel]>,
    tr: f64,
) -> Result<CorrectionPanel, RelaxError> {
    let t1_panel = match mode {
        T1Mode::Individual => {
            let panel = individual.ok_or_else(|| {
                RelaxError::Configuration(
                    "individual T1 mode requires long-TR and short-TR resting data".into(),
                )
            })?;
            T1Panel {
                source: T1Source::Individual,
                ..panel.clone()
            }
        }
        T1Mode::Fixed => T1Panel {
            t1: *fixed_table,
            std_error: PerMetabolite::splat(0.0),
            source: T1Source::Fixed,
        },
        T1Mode::CohortMean => {
            let panels = cohort.filter(|p| !p.is_empty()).ok_or_else(|| {
                RelaxError::Configuration(
                    "cohort-mean T1 mode requires at least one individual T1 panel".into(),
                )
            })?;
            let n = panels.len() as f64;
            let mean = PerMetabolite::from_fn(|m| panels.iter().map(|p| p.t1[m]).sum::<f64>() / n);
            let std_error = PerMetabolite::from_fn(|m| {
                if panels.len() < 2 {
                    return 0.0;
                }
                let var = panels
                    .iter()
                    .map(|p| (p.t1[m] - mean[m]).powi(2))
                    .sum::<f64>()
                    / (n - 1.0);
                (var / n).sqrt()
            });
            T1Panel {
                t1: mean,
                std_error,
                source: T1Source::CohortMean,
            }
        }
    };
    panel_from_t1(t1_panel, tr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn correction_factor_matches_hand_evaluation() {
        // 1 / (1 - e^{-4/6.6}) and 1 / (1 - e^{-4/6.1})
        assert_abs_diff_eq!(correction_factor(6.60, 4.0).unwrap(), 2.2002, epsilon = 1e-4);
        assert_abs_diff_eq!(correction_factor(6.10, 4.0).unwrap(), 2.0793, epsilon = 1e-4);
        assert_abs_diff_eq!(correction_factor(4.0, 400.0).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn correction_factor_limits_and_domain() {
        assert!(correction_factor(1.0, 1e-3).unwrap() > 100.0);
        assert!(correction_factor(0.0, 4.0).is_err());
        assert!(correction_factor(6.0, -1.0).is_err());
    }

    #[test]
    fn apply_correction_cases() {
        assert_eq!(apply_correction(1.0, 1.0).unwrap(), 1.0);
        assert_abs_diff_eq!(apply_correction(10.0, 2.2002).unwrap(), 22.002, epsilon = 1e-12);
        assert_eq!(apply_correction(0.0, 3.0).unwrap(), 0.0);
        assert!(apply_correction(1.0, 0.9).is_err());
    }

    #[test]
    fn inverts_forward_saturation_at_6_6_s() {
        // amp_short carries 1 - e^{-4/6.6}; amp_long carries 1 - e^{-30/6.6}.
        let long = PerMetabolite::splat(-(-30.0f64 / 6.6).exp_m1());
        let short = PerMetabolite::splat(0.454_504_9);
        let panel = estimate_t1(&long, &short, 30.0, 4.0).unwrap();
        for (_, &t1) in panel.t1.iter() {
            assert_abs_diff_eq!(t1, 6.60, epsilon = 0.01);
        }
        assert_eq!(panel.source, T1Source::Individual);
    }

    #[test]
    fn equal_amplitudes_are_unphysical() {
        let amps = PerMetabolite::splat(1.0);
        match estimate_t1(&amps, &amps, 30.0, 4.0) {
            Err(RelaxError::UnphysicalSaturation { metabolite, .. }) => {
                assert_eq!(metabolite, Metabolite::PCr)
            }
            other => panic!("expected unphysical saturation, got {other:?}"),
        }
    }

    #[test]
    fn ratio_below_asymptote_is_out_of_range() {
        let long = PerMetabolite::splat(1.0);
        // tr_short/tr_long = 0.1333 is the T1 -> inf limit.
        let short = PerMetabolite::splat(0.1);
        assert!(matches!(
            estimate_t1(&long, &short, 30.0, 4.0),
            Err(RelaxError::OutOfRange { .. })
        ));
    }

    #[test]
    fn standard_error_is_propagated() {
        let t1 = 6.0;
        let long = PerMetabolite::splat(saturation_fraction(t1, 30.0));
        let short = PerMetabolite::splat(saturation_fraction(t1, 4.0));
        let zero = PerMetabolite::splat(0.0);
        let se = PerMetabolite::splat(0.01);
        let none = estimate_t1_with_errors(&long, &short, Some((&zero, &zero)), 30.0, 4.0).unwrap();
        let some = estimate_t1_with_errors(&long, &short, Some((&se, &se)), 30.0, 4.0).unwrap();
        assert_eq!(none.std_error.pcr, 0.0);
        assert!(some.std_error.pcr > 0.0);
    }

    #[test]
    fn build_panel_modes() {
        let fixed = default_fixed_t1();
        let panel = build_panel(T1Mode::Fixed, None, &fixed, None, 4.0).unwrap();
        assert_abs_diff_eq!(panel.r.pcr, 2.2002, epsilon = 1e-4);
        assert_eq!(panel.t1_panel.source, T1Source::Fixed);

        let mut individual = T1Panel {
            t1: fixed,
            std_error: PerMetabolite::splat(0.0),
            source: T1Source::Individual,
        };
        individual.t1.pcr = 6.10;
        let ind = build_panel(T1Mode::Individual, Some(&individual), &fixed, None, 4.0).unwrap();
        assert!(ind.r.pcr < panel.r.pcr);
        assert!(apply_correction(5.0, ind.r.pcr).unwrap() < apply_correction(5.0, panel.r.pcr).unwrap());

        let a = T1Panel {
            t1: PerMetabolite::splat(6.0),
            ..individual.clone()
        };
        let b = T1Panel {
            t1: PerMetabolite::splat(7.0),
            ..individual.clone()
        };
        let cohort = [a, b];
        let mean = build_panel(T1Mode::CohortMean, None, &fixed, Some(&cohort), 4.0).unwrap();
        assert_abs_diff_eq!(mean.t1_panel.t1.pi, 6.5, epsilon = 1e-12);
        assert_abs_diff_eq!(mean.r.pi, correction_factor(6.5, 4.0).unwrap(), epsilon = 1e-12);
        assert_eq!(mean.t1_panel.source, T1Source::CohortMean);
    }

    #[test]
    fn build_panel_missing_inputs() {
        let fixed = default_fixed_t1();
        assert!(matches!(
            build_panel(T1Mode::Individual, None, &fixed, None, 4.0),
            Err(RelaxError::Configuration(_))
        ));
        assert!(matches!(
            build_panel(T1Mode::CohortMean, None, &fixed, Some(&[]), 4.0),
            Err(RelaxError::Configuration(_))
        ));
    }

    proptest! {
        #[test]
        fn estimate_inverts_forward_model(t1 in 2.0f64..10.0) {
            let long = PerMetabolite::splat(saturation_fraction(t1, 30.0));
            let short = PerMetabolite::splat(saturation_fraction(t1, 4.0));
            let panel = estimate_t1(&long, &short, 30.0, 4.0).unwrap();
            prop_assert!((panel.t1.batp - t1).abs() < 1e-6);
        }

        #[test]
        fn factor_increases_with_t1_and_decreases_with_tr(
            t1 in 2.0f64..20.0, dt1 in 0.01f64..5.0, tr in 0.5f64..30.0, dtr in 0.01f64..5.0,
        ) {
            let r = correction_factor(t1, tr).unwrap();
            prop_assert!(r >= 1.0);
            prop_assert!(correction_factor(t1 + dt1, tr).unwrap() > r);
            prop_assert!(correction_factor(t1, tr + dtr).unwrap() < r);
        }
    }
}
