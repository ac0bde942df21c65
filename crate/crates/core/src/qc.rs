//! Quality-control scoring of kinetic fits, phase-level decisions, and the
//! first-recovery-point check.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kinetics::{fit_recovery, KineticFit, KineticsError};
use crate::metabolite::Metabolite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcError {
    #[error("missing QC variable {0}")]
    MissingVariable(QcVariable),
    #[error("invalid rubric: {0}")]
    InvalidRubric(String),
    #[error("start index {index} beyond limit {limit}")]
    IndexBeyondLimit { index: usize, limit: usize },
    #[error("subject is not flagged for first-point reselection and no override was given")]
    NotFlagged,
    #[error(transparent)]
    Kinetics(#[from] KineticsError),
}

/// Maximum recovery start index considered for first-point reselection.
pub const RESELECTION_LIMIT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcVariable {
    PcrDepletion,
    R2PcrEx,
    R2PiEx,
    TauPcrEx,
    TauPiEx,
    OutliersEx,
    R2PcrRec,
    R2PiRec,
    TauPcrRec,
    TauPiRec,
    OutliersRec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcPhase {
    Exercise,
    Recovery,
}

impl QcVariable {
    pub const ALL: [QcVariable; 11] = [
        QcVariable::PcrDepletion,
        QcVariable::R2PcrEx,
        QcVariable::R2PiEx,
        QcVariable::TauPcrEx,
        QcVariable::TauPiEx,
        QcVariable::OutliersEx,
        QcVariable::R2PcrRec,
        QcVariable::R2PiRec,
        QcVariable::TauPcrRec,
        QcVariable::TauPiRec,
        QcVariable::OutliersRec,
    ];

    pub fn phase(self) -> QcPhase {
        use QcVariable::*;
        match self {
            PcrDepletion | R2PcrEx | R2PiEx | TauPcrEx | TauPiEx | OutliersEx => QcPhase::Exercise,
            R2PcrRec | R2PiRec | TauPcrRec | TauPiRec | OutliersRec => QcPhase::Recovery,
        }
    }

    pub fn label(self) -> &'static str {
        use QcVariable::*;
        match self {
            PcrDepletion => "pcr_depletion",
            R2PcrEx => "r2_pcr_ex",
            R2PiEx => "r2_pi_ex",
            TauPcrEx => "tau_pcr_ex",
            TauPiEx => "tau_pi_ex",
            OutliersEx => "outliers_ex",
            R2PcrRec => "r2_pcr_rec",
            R2PiRec => "r2_pi_rec",
            TauPcrRec => "tau_pcr_rec",
            TauPiRec => "tau_pi_rec",
            OutliersRec => "outliers_rec",
        }
    }
}

impl fmt::Display for QcVariable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// One value range of a rubric variable. `None` bounds are unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub min: Option<f64>,
    pub max: Option<f64>,
    #[serde(default = "yes")]
    pub min_inclusive: bool,
    #[serde(default)]
    pub max_inclusive: bool,
    pub score: i32,
}

fn yes() -> bool {
    true
}

impl Band {
    fn new(min: Option<f64>, max: Option<f64>, score: i32) -> Self {
        Band {
            min,
            max,
            min_inclusive: true,
            max_inclusive: false,
            score,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        let above = match self.min {
            None => true,
            Some(lo) if self.min_inclusive => x >= lo,
            Some(lo) => x > lo,
        };
        let below = match self.max {
            None => true,
            Some(hi) if self.max_inclusive => x <= hi,
            Some(hi) => x < hi,
        };
        above && below
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QcRubric {
    pub bands: BTreeMap<QcVariable, Vec<Band>>,
    /// Exercise is excluded when its total is at or below this value.
    pub exercise_exclude_at: i32,
    /// The subject is excluded when the recovery total is at or below this value.
    pub subject_exclude_at: i32,
}

fn r2_bands() -> Vec<Band> {
    vec![
        Band::new(None, Some(0.5), -3),
        Band::new(Some(0.5), Some(0.75), -2),
        Band::new(Some(0.75), Some(0.9), -1),
        Band::new(Some(0.9), None, 0),
    ]
}

fn tau_bands() -> Vec<Band> {
    vec![
        Band::new(None, Some(5.0), -2),
        Band {
            min: Some(5.0),
            max: Some(120.0),
            min_inclusive: true,
            max_inclusive: true,
            score: 0,
        },
        Band {
            min: Some(120.0),
            max: None,
            min_inclusive: false,
            max_inclusive: false,
            score: -2,
        },
    ]
}

fn outlier_bands() -> Vec<Band> {
    vec![
        Band {
            min: None,
            max: Some(0.1),
            min_inclusive: true,
            max_inclusive: true,
            score: 0,
        },
        Band {
            min: Some(0.1),
            max: Some(0.25),
            min_inclusive: false,
            max_inclusive: true,
            score: -1,
        },
        Band {
            min: Some(0.25),
            max: None,
            min_inclusive: false,
            max_inclusive: false,
            score: -2,
        },
    ]
}

impl Default for QcRubric {
    fn default() -> Self {
        use QcVariable::*;
        let mut bands = BTreeMap::new();
        bands.insert(
            PcrDepletion,
            vec![Band::new(None, Some(20.0), -3), Band::new(Some(20.0), None, 0)],
        );
        for v in [R2PcrEx, R2PiEx, R2PcrRec, R2PiRec] {
            bands.insert(v, r2_bands());
        }
        for v in [TauPcrEx, TauPiEx, TauPcrRec, TauPiRec] {
            bands.insert(v, tau_bands());
        }
        for v in [OutliersEx, OutliersRec] {
            bands.insert(v, outlier_bands());
        }
        QcRubric {
            bands,
            exercise_exclude_at: -2,
            subject_exclude_at: -2,
        }
    }
}

impl QcRubric {
    /// Checks that each variable's bands are ordered, contiguous, cover the
    /// real line, and carry scores in 0..=-3.
    pub fn validate(&self) -> Result<(), QcError> {
        for v in QcVariable::ALL {
            let bands = self
                .bands
                .get(&v)
                .ok_or_else(|| QcError::InvalidRubric(format!("no bands for {v}")))?;
            let bad = |msg: &str| QcError::InvalidRubric(format!("{v}: {msg}"));
            let (first, last) = match (bands.first(), bands.last()) {
                (Some(f), Some(l)) => (f, l),
                _ => return Err(bad("no bands")),
            };
            if first.min.is_some() {
                return Err(bad("lowest band must be unbounded below"));
            }
            if last.max.is_some() {
                return Err(bad("highest band must be unbounded above"));
            }
            for b in bands {
                if !(-3..=0).contains(&b.score) {
                    return Err(bad("scores must lie in 0..=-3"));
                }
                if let (Some(lo), Some(hi)) = (b.min, b.max) {
                    if !(lo < hi || (lo == hi && b.min_inclusive && b.max_inclusive)) {
                        return Err(bad("empty band"));
                    }
                }
            }
            for pair in bands.windows(2) {
                let (a, b) = (&pair[0], &pair[1]);
                match (a.max, b.min) {
                    (Some(hi), Some(lo)) if hi == lo && a.max_inclusive != b.min_inclusive => {}
                    _ => return Err(bad("bands must meet exactly once at each boundary")),
                }
            }
        }
        Ok(())
    }

    pub fn score_of(&self, variable: QcVariable, value: f64) -> Result<i32, QcError> {
        let bands = self
            .bands
            .get(&variable)
            .ok_or_else(|| QcError::InvalidRubric(format!("no bands for {variable}")))?;
        // NaN values (failed fits) score as the worst band.
        if value.is_nan() {
            return Ok(bands.iter().map(|b| b.score).min().unwrap_or(0));
        }
        bands
            .iter()
            .find(|b| b.contains(value))
            .map(|b| b.score)
            .ok_or_else(|| QcError::InvalidRubric(format!("{variable}: {value} not covered")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    AutomaticSuggestion,
    OperatorChoice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reselection {
    pub index: usize,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub operator: Option<String>,
    /// Set when the operator reselected without an automatic flag.
    #[serde(default)]
    pub override_flag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcReport {
    pub values: BTreeMap<QcVariable, f64>,
    pub scores: BTreeMap<QcVariable, i32>,
    pub score_total_exercise: i32,
    pub score_total_recovery: i32,
    pub exercise_decision: Decision,
    pub subject_decision: Decision,
    pub first_point_flag: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_start_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reselected_start_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reselection: Option<Reselection>,
}

impl QcReport {
    /// Flagged and not yet reviewed.
    pub fn pending_review(&self) -> bool {
        self.first_point_flag && self.reselection.is_none()
    }
}

/// Scores a full set of QC variables. The report carries no first-point
/// information; see [`flag_first_point`].
pub fn score(variables: &BTreeMap<QcVariable, f64>, rubric: &QcRubric) -> Result<QcReport, QcError> {
    let mut scores = BTreeMap::new();
    let (mut ex, mut rec) = (0, 0);
    for v in QcVariable::ALL {
        let value = *variables.get(&v).ok_or(QcError::MissingVariable(v))?;
        let s = rubric.score_of(v, value)?;
        scores.insert(v, s);
        match v.phase() {
            QcPhase::Exercise => ex += s,
            QcPhase::Recovery => rec += s,
        }
    }
    let subject_decision = if rec <= rubric.subject_exclude_at {
        Decision::Excluded
    } else {
        Decision::Accepted
    };
    let exercise_decision = if subject_decision == Decision::Excluded || ex <= rubric.exercise_exclude_at {
        Decision::Excluded
    } else {
        Decision::Accepted
    };
    Ok(QcReport {
        values: variables
            .iter()
            .filter(|(k, _)| QcVariable::ALL.contains(k))
            .map(|(k, v)| (*k, *v))
            .collect(),
        scores,
        score_total_exercise: ex,
        score_total_recovery: rec,
        exercise_decision,
        subject_decision,
        first_point_flag: false,
        suggested_start_index: None,
        reselected_start_index: None,
        reselection: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Outliers {
    pub fraction: f64,
    pub indices: Vec<usize>,
}

/// Points of the fitted range whose standardized residual exceeds 3.
/// Indices are positions in `values`.
pub fn detect_outliers(times: &[f64], values: &[f64], fit: &KineticFit) -> Outliers {
    let z = fit.standardized_residuals(times, values);
    let indices: Vec<usize> = z
        .iter()
        .enumerate()
        .filter(|(_, z)| z.abs() > 3.0)
        .map(|(i, _)| i + fit.start_index)
        .collect();
    let n = z.len().max(1);
    Outliers {
        fraction: indices.len() as f64 / n as f64,
        indices,
    }
}

/// Kinetic fits of one subject that feed the QC variables. Missing fits
/// (fit failures) score as the worst band.
#[derive(Debug, Clone, Default)]
pub struct QcInputs<'a> {
    pub depletion_pct: Option<f64>,
    pub pcr_ex: Option<(&'a KineticFit, &'a [f64], &'a [f64])>,
    pub pi_ex: Option<(&'a KineticFit, &'a [f64], &'a [f64])>,
    pub pcr_rec: Option<(&'a KineticFit, &'a [f64], &'a [f64])>,
    pub pi_rec: Option<(&'a KineticFit, &'a [f64], &'a [f64])>,
}

/// Builds the QC variable table from fits and their series.
pub fn variables(inputs: &QcInputs) -> BTreeMap<QcVariable, f64> {
    use QcVariable::*;
    let mut out = BTreeMap::new();
    out.insert(PcrDepletion, inputs.depletion_pct.unwrap_or(f64::NAN));
    let fit_vars = |fit: Option<(&KineticFit, &[f64], &[f64])>| match fit {
        Some((f, t, v)) => (f.r2, f.tau, detect_outliers(t, v, f).fraction),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    let (r2, tau, out_pcr_ex) = fit_vars(inputs.pcr_ex);
    out.insert(R2PcrEx, r2);
    out.insert(TauPcrEx, tau);
    let (r2, tau, out_pi_ex) = fit_vars(inputs.pi_ex);
    out.insert(R2PiEx, r2);
    out.insert(TauPiEx, tau);
    out.insert(OutliersEx, worst_fraction(out_pcr_ex, out_pi_ex));
    let (r2, tau, out_pcr_rec) = fit_vars(inputs.pcr_rec);
    out.insert(R2PcrRec, r2);
    out.insert(TauPcrRec, tau);
    let (r2, tau, out_pi_rec) = fit_vars(inputs.pi_rec);
    out.insert(R2PiRec, r2);
    out.insert(TauPiRec, tau);
    out.insert(OutliersRec, worst_fraction(out_pcr_rec, out_pi_rec));
    out
}

fn worst_fraction(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Recovery-phase series of one metabolite, starting at the first recovery frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoverySeries {
    pub metabolite: Metabolite,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstPointCheck {
    pub flag: bool,
    pub suggested_index: Option<usize>,
    pub z0: f64,
    pub r2_at_zero: f64,
}

/// Minimum r2 gain from dropping leading points for a first-point flag.
pub const FIRST_POINT_R2_GAIN: f64 = 0.02;

/// Checks whether the first recovery point looks corrupted: its standardized
/// residual exceeds 3 and refitting from a later start raises r2 by at least
/// [`FIRST_POINT_R2_GAIN`] with the new first point no longer an outlier.
pub fn flag_first_point(series: &RecoverySeries, fit: &KineticFit) -> FirstPointCheck {
    let (t, v) = (&series.times, &series.values);
    let z = fit.standardized_residuals(t, v);
    let z0 = z.first().copied().unwrap_or(0.0);
    let mut check = FirstPointCheck {
        flag: false,
        suggested_index: None,
        z0,
        r2_at_zero: fit.r2,
    };
    if t.len() < 5 || fit.start_index != 0 || z0.abs() <= 3.0 {
        return check;
    }
    for k in 1..=RESELECTION_LIMIT {
        let Ok(refit) = fit_recovery(series.metabolite, t, v, k) else {
            continue;
        };
        let zk = refit.standardized_residuals(t, v);
        let first_ok = zk.first().is_some_and(|z| z.abs() <= 3.0);
        if refit.r2 >= fit.r2 + FIRST_POINT_R2_GAIN && first_ok {
            check.flag = true;
            check.suggested_index = Some(k);
            break;
        }
    }
    check
}

/// Refits recovery series from an approved start index.
pub fn refit_recovery(series: &[RecoverySeries], index: usize) -> Result<Vec<KineticFit>, QcError> {
    if index > RESELECTION_LIMIT {
        return Err(QcError::IndexBeyondLimit {
            index,
            limit: RESELECTION_LIMIT,
        });
    }
    series
        .iter()
        .map(|s| fit_recovery(s.metabolite, &s.times, &s.values, index).map_err(QcError::from))
        .collect()
}

/// Checks the reselection preconditions and returns the record to store on
/// the report.
pub fn authorize_reselection(
    report: &QcReport,
    index: usize,
    operator: Option<&str>,
    override_flag: bool,
) -> Result<Reselection, QcError> {
    if index > RESELECTION_LIMIT {
        return Err(QcError::IndexBeyondLimit {
            index,
            limit: RESELECTION_LIMIT,
        });
    }
    if !report.first_point_flag && !override_flag {
        return Err(QcError::NotFlagged);
    }
    let provenance = if operator.is_some() {
        Provenance::OperatorChoice
    } else {
        Provenance::AutomaticSuggestion
    };
    Ok(Reselection {
        index,
        provenance,
        operator: operator.map(str::to_string),
        override_flag: override_flag && !report.first_point_flag,
    })
}

/// Applies an approved start index: recovery fits are recomputed, recovery
/// QC variables replaced, and the report rescored. Exercise variables and
/// scores are left untouched.
pub fn apply_reselection(
    report: &QcReport,
    series: &[RecoverySeries],
    index: usize,
    operator: Option<&str>,
    override_flag: bool,
    rubric: &QcRubric,
) -> Result<(Vec<KineticFit>, QcReport), QcError> {
    let reselection = authorize_reselection(report, index, operator, override_flag)?;
    let fits = refit_recovery(series, index)?;
    let mut vars = report.values.clone();
    let find = |m: Metabolite| {
        fits.iter()
            .zip(series)
            .find(|(f, _)| f.metabolite == m)
            .map(|(f, s)| (f, s.times.as_slice(), s.values.as_slice()))
    };
    let pcr = find(Metabolite::PCr);
    let pi = find(Metabolite::Pi);
    let inputs = QcInputs {
        pcr_rec: pcr,
        pi_rec: pi,
        ..Default::default()
    };
    let rec = variables(&inputs);
    for v in [
        QcVariable::R2PcrRec,
        QcVariable::TauPcrRec,
        QcVariable::R2PiRec,
        QcVariable::TauPiRec,
        QcVariable::OutliersRec,
    ] {
        let keep_old = match v {
            QcVariable::R2PcrRec | QcVariable::TauPcrRec => pcr.is_none(),
            QcVariable::R2PiRec | QcVariable::TauPiRec => pi.is_none(),
            _ => pcr.is_none() || pi.is_none(),
        };
        if !keep_old {
            vars.insert(v, rec[&v]);
        }
    }
    let mut updated = score(&vars, rubric)?;
    updated.first_point_flag = report.first_point_flag;
    updated.suggested_start_index = report.suggested_start_index;
    updated.reselected_start_index = Some(index);
    updated.reselection = Some(reselection);
    Ok((fits, updated))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinetics::fit_recovery;

    fn clean_vars() -> BTreeMap<QcVariable, f64> {
        use QcVariable::*;
        let mut v = BTreeMap::new();
        v.insert(PcrDepletion, 40.0);
        for k in [R2PcrEx, R2PiEx, R2PcrRec, R2PiRec] {
            v.insert(k, 0.98);
        }
        for k in [TauPcrEx, TauPiEx, TauPcrRec, TauPiRec] {
            v.insert(k, 35.0);
        }
        v.insert(OutliersEx, 0.0);
        v.insert(OutliersRec, 0.0);
        v
    }

    #[test]
    fn default_rubric_is_valid() {
        QcRubric::default().validate().unwrap();
    }

    #[test]
    fn gap_in_rubric_rejected() {
        let mut r = QcRubric::default();
        r.bands.get_mut(&QcVariable::R2PcrEx).unwrap()[1].min = Some(0.55);
        assert!(r.validate().is_err());
        let mut r = QcRubric::default();
        r.bands.remove(&QcVariable::OutliersRec);
        assert!(r.validate().is_err());
    }

    #[test]
    fn clean_subject_scores_zero() {
        let r = score(&clean_vars(), &QcRubric::default()).unwrap();
        assert_eq!(r.score_total_exercise, 0);
        assert_eq!(r.score_total_recovery, 0);
        assert_eq!(r.exercise_decision, Decision::Accepted);
        assert_eq!(r.subject_decision, Decision::Accepted);
    }

    #[test]
    fn low_depletion_excludes_exercise_only() {
        let mut v = clean_vars();
        v.insert(QcVariable::PcrDepletion, 15.0);
        let r = score(&v, &QcRubric::default()).unwrap();
        assert_eq!(r.exercise_decision, Decision::Excluded);
        assert_eq!(r.subject_decision, Decision::Accepted);
    }

    #[test]
    fn poor_recovery_r2_excludes_subject() {
        let mut v = clean_vars();
        v.insert(QcVariable::R2PcrRec, 0.4);
        let r = score(&v, &QcRubric::default()).unwrap();
        assert_eq!(r.subject_decision, Decision::Excluded);
        assert_eq!(r.exercise_decision, Decision::Excluded);
    }

    #[test]
    fn missing_variable_named() {
        let mut v = clean_vars();
        v.remove(&QcVariable::TauPiEx);
        assert_eq!(
            score(&v, &QcRubric::default()),
            Err(QcError::MissingVariable(QcVariable::TauPiEx))
        );
    }

    #[test]
    fn band_edges() {
        let r = QcRubric::default();
        assert_eq!(r.score_of(QcVariable::R2PcrRec, 0.5).unwrap(), -2);
        assert_eq!(r.score_of(QcVariable::R2PcrRec, 0.9).unwrap(), 0);
        assert_eq!(r.score_of(QcVariable::TauPcrRec, 120.0).unwrap(), 0);
        assert_eq!(r.score_of(QcVariable::TauPcrRec, 120.5).unwrap(), -2);
        assert_eq!(r.score_of(QcVariable::OutliersRec, 0.1).unwrap(), 0);
        assert_eq!(r.score_of(QcVariable::OutliersRec, 0.2).unwrap(), -1);
        assert_eq!(r.score_of(QcVariable::OutliersRec, 0.3).unwrap(), -2);
        assert_eq!(r.score_of(QcVariable::PcrDepletion, f64::NAN).unwrap(), -3);
    }

    fn recovery(n: usize, spike: Option<(usize, f64)>) -> RecoverySeries {
        let times: Vec<f64> = (0..n).map(|k| 160.0 + 4.0 * k as f64).collect();
        let mut values: Vec<f64> = times
            .iter()
            .enumerate()
            .map(|(k, &t)| {
                let jitter = 0.03 * (((k * 7919) % 17) as f64 - 8.0) / 8.0;
                33.0 - 13.0 * (-(t - 160.0) / 33.0).exp() + jitter
            })
            .collect();
        if let Some((k, s)) = spike {
            values[k] += s;
        }
        RecoverySeries {
            metabolite: Metabolite::PCr,
            times,
            values,
        }
    }

    #[test]
    fn outliers_on_clean_and_spiked() {
        let s = recovery(60, None);
        let fit = fit_recovery(Metabolite::PCr, &s.times, &s.values, 0).unwrap();
        assert_eq!(detect_outliers(&s.times, &s.values, &fit).fraction, 0.0);

        let s = recovery(60, Some((30, 0.3)));
        let fit = fit_recovery(Metabolite::PCr, &s.times, &s.values, 0).unwrap();
        let o = detect_outliers(&s.times, &s.values, &fit);
        assert_eq!(o.indices, vec![30]);
    }

    #[test]
    fn all_spike_series_does_not_crash() {
        let times: Vec<f64> = (0..20).map(|k| 4.0 * k as f64).collect();
        let values: Vec<f64> = (0..20).map(|k| if k % 2 == 0 { 100.0 } else { 0.0 }).collect();
        let fit = fit_recovery(Metabolite::PCr, &times, &values, 0).unwrap();
        let o = detect_outliers(&times, &values, &fit);
        assert!((0.0..=1.0).contains(&o.fraction));
    }

    #[test]
    fn first_point_flag_cases() {
        let clean = recovery(90, None);
        let fit = fit_recovery(Metabolite::PCr, &clean.times, &clean.values, 0).unwrap();
        assert!(!flag_first_point(&clean, &fit).flag);

        let spiked = recovery(90, Some((0, -8.0)));
        let fit = fit_recovery(Metabolite::PCr, &spiked.times, &spiked.values, 0).unwrap();
        let check = flag_first_point(&spiked, &fit);
        assert!(check.flag);
        assert_eq!(check.suggested_index, Some(1));
        let refit = fit_recovery(Metabolite::PCr, &spiked.times, &spiked.values, 1).unwrap();
        assert!(refit.r2 > fit.r2);

        let later = recovery(90, Some((5, -8.0)));
        let fit = fit_recovery(Metabolite::PCr, &later.times, &later.values, 0).unwrap();
        assert!(!flag_first_point(&later, &fit).flag);
    }

    #[test]
    fn reselection_rules() {
        let spiked = recovery(90, Some((0, -8.0)));
        let fit = fit_recovery(Metabolite::PCr, &spiked.times, &spiked.values, 0).unwrap();
        let check = flag_first_point(&spiked, &fit);
        let mut report = score(&clean_vars(), &QcRubric::default()).unwrap();
        let unflagged = report.clone();
        report.first_point_flag = check.flag;
        report.suggested_start_index = check.suggested_index;

        let rubric = QcRubric::default();
        let series = vec![spiked];
        let (fits, updated) = apply_reselection(&report, &series, 1, None, false, &rubric).unwrap();
        assert!((fits[0].tau - 33.0).abs() / 33.0 < 0.02);
        assert!((fit.tau - 33.0).abs() / 33.0 > (fits[0].tau - 33.0).abs() / 33.0);
        assert_eq!(updated.reselected_start_index, Some(1));
        assert_eq!(
            updated.reselection.as_ref().unwrap().provenance,
            Provenance::AutomaticSuggestion
        );
        for v in QcVariable::ALL.into_iter().filter(|v| v.phase() == QcPhase::Exercise) {
            assert_eq!(updated.values[&v], report.values[&v]);
            assert_eq!(updated.scores[&v], report.scores[&v]);
        }
        assert!(!updated.pending_review());

        assert!(matches!(
            apply_reselection(&report, &series, 4, None, false, &rubric),
            Err(QcError::IndexBeyondLimit { .. })
        ));
        assert_eq!(
            apply_reselection(&unflagged, &series, 1, None, false, &rubric).unwrap_err(),
            QcError::NotFlagged
        );
        let (_, forced) = apply_reselection(&unflagged, &series, 1, Some("op"), true, &rubric).unwrap();
        assert!(forced.reselection.unwrap().override_flag);
    }

    #[test]
    fn worsening_never_improves_total() {
        let rubric = QcRubric::default();
        let base = score(&clean_vars(), &rubric).unwrap();
        let base_total = base.score_total_exercise + base.score_total_recovery;
        let worse: [(QcVariable, f64); 5] = [
            (QcVariable::PcrDepletion, 10.0),
            (QcVariable::R2PiEx, 0.6),
            (QcVariable::TauPcrRec, 200.0),
            (QcVariable::OutliersEx, 0.5),
            (QcVariable::R2PcrRec, 0.8),
        ];
        for (k, val) in worse {
            let mut v = clean_vars();
            v.insert(k, val);
            let r = score(&v, &rubric).unwrap();
            assert!(r.score_total_exercise + r.score_total_recovery <= base_total);
        }
    }
}
