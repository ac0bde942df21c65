//! Patient vs control comparisons across T1 modes, with and without QC
//! exclusions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::markers::{MarkerPhase, MARKERS};
use super::schema::SubjectRecord;
use crate::qc::Decision;
use crate::relax::T1Mode;
use crate::stats::{choose_and_test, describe, GroupSummary, TestResult};

/// Smallest group size for which a marker row is computed.
pub const MIN_GROUP_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    #[serde(rename = "↗")]
    Up,
    #[serde(rename = "↘")]
    Down,
}

impl Trend {
    pub fn arrow(self) -> &'static str {
        match self {
            Trend::Up => "↗",
            Trend::Down => "↘",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub marker: String,
    pub phase: MarkerPhase,
    pub patient: GroupSummary,
    pub control: GroupSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestResult>,
    pub significant: bool,
    /// Direction of the patient mean relative to controls, set only when
    /// significant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trend: Option<Trend>,
    pub computable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortComparison {
    pub mode: T1Mode,
    pub with_qcs: bool,
    pub patient_group: String,
    pub control_group: String,
    pub alpha: f64,
    pub rows: Vec<ComparisonRow>,
}

impl CohortComparison {
    pub fn row(&self, marker: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.marker == marker)
    }
}

/// Marker values of one analyzed subject under `mode`. With QC, an excluded
/// subject contributes nothing and an excluded exercise phase drops the
/// exercise markers. Without QC the markers from the original recovery start
/// are used.
pub fn subject_markers(record: &SubjectRecord, mode: T1Mode, with_qcs: bool) -> Option<BTreeMap<String, f64>> {
    let analysis = record.analysis.as_ref()?;
    let m = analysis.modes.get(&mode)?;
    if !with_qcs {
        return Some(m.unreviewed_markers.clone().unwrap_or_else(|| m.markers.clone()));
    }
    let qc = &analysis.qc;
    if qc.subject_decision == Decision::Excluded {
        return None;
    }
    let exercise_out = qc.exercise_decision == Decision::Excluded;
    Some(
        m.markers
            .iter()
            .filter(|(name, _)| {
                !(exercise_out
                    && super::markers::marker_spec(name).is_some_and(|s| s.phase == MarkerPhase::Exercise))
            })
            .map(|(k, v)| (k.clone(), *v))
            .collect(),
    )
}

fn group_values(records: &[&SubjectRecord], marker: &str, mode: T1Mode, with_qcs: bool) -> Vec<f64> {
    records
        .iter()
        .filter_map(|r| subject_markers(r, mode, with_qcs))
        .filter_map(|m| m.get(marker).copied())
        .collect()
}

/// Compares two groups marker by marker. Records are taken in id order so the
/// output does not depend on input order.
pub fn compare_cohorts(
    records: &[SubjectRecord],
    patient_group: &str,
    control_group: &str,
    mode: T1Mode,
    with_qcs: bool,
    alpha: f64,
) -> CohortComparison {
    let mut sorted: Vec<&SubjectRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let patients: Vec<&SubjectRecord> = sorted.iter().copied().filter(|r| r.group == patient_group).collect();
    let controls: Vec<&SubjectRecord> = sorted.iter().copied().filter(|r| r.group == control_group).collect();

    let rows = MARKERS
        .iter()
        .map(|spec| {
            let p = group_values(&patients, spec.name, mode, with_qcs);
            let c = group_values(&controls, spec.name, mode, with_qcs);
            let (patient, control) = (describe(&p), describe(&c));
            let mut row = ComparisonRow {
                marker: spec.name.to_string(),
                phase: spec.phase,
                patient,
                control,
                test: None,
                significant: false,
                trend: None,
                computable: false,
                note: None,
            };
            if p.len() < MIN_GROUP_SIZE || c.len() < MIN_GROUP_SIZE {
                row.note = Some(format!("needs at least {MIN_GROUP_SIZE} subjects per group"));
                return row;
            }
            match choose_and_test(&p, &c, alpha) {
                Ok(test) => {
                    row.computable = true;
                    row.significant = test.p_value < alpha;
                    if row.significant {
                        row.trend = Some(if row.patient.mean > row.control.mean { Trend::Up } else { Trend::Down });
                    }
                    row.test = Some(test);
                }
                Err(e) => row.note = Some(e.to_string()),
            }
            row
        })
        .collect();

    CohortComparison {
        mode,
        with_qcs,
        patient_group: patient_group.to_string(),
        control_group: control_group.to_string(),
        alpha,
        rows,
    }
}

/// Comparisons for every T1 mode with and without QC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub patient_group: String,
    pub control_group: String,
    pub n_subjects: usize,
    /// Ids of subjects whose analysis failed, with the error.
    pub analysis_errors: BTreeMap<String, String>,
    pub comparisons: Vec<CohortComparison>,
}

impl CohortReport {
    pub fn comparison(&self, mode: T1Mode, with_qcs: bool) -> Option<&CohortComparison> {
        self.comparisons.iter().find(|c| c.mode == mode && c.with_qcs == with_qcs)
    }
}

/// Builds the full report. Modes no subject was analyzed under are skipped.
pub fn cohort_report(records: &[SubjectRecord], patient_group: &str, control_group: &str, alpha: f64) -> CohortReport {
    let mut comparisons = Vec::new();
    for mode in T1Mode::ALL {
        let available = records
            .iter()
            .any(|r| r.analysis.as_ref().is_some_and(|a| a.modes.contains_key(&mode)));
        if !available {
            continue;
        }
        for with_qcs in [true, false] {
            comparisons.push(compare_cohorts(records, patient_group, control_group, mode, with_qcs, alpha));
        }
    }
    CohortReport {
        patient_group: patient_group.to_string(),
        control_group: control_group.to_string(),
        n_subjects: records.len(),
        analysis_errors: records
            .iter()
            .filter_map(|r| r.analysis_error.as_ref().map(|e| (r.id.clone(), e.clone())))
            .collect(),
        comparisons,
    }
}

pub fn report_json(report: &CohortReport) -> String {
    serde_json::to_string_pretty(report).expect("reports serialize")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.filter(|x| x.is_finite()).map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One CSV row per mode, QC setting and marker.
pub fn report_csv(report: &CohortReport) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "mode",
        "qcs",
        "marker",
        "phase",
        "patient_n",
        "patient_mean",
        "patient_sd",
        "control_n",
        "control_mean",
        "control_sd",
        "p",
        "test",
        "trend",
    ])?;
    for c in &report.comparisons {
        for r in &c.rows {
            let phase = match r.phase {
                MarkerPhase::Rest => "rest",
                MarkerPhase::Exercise => "exercise",
                MarkerPhase::Recovery => "recovery",
            };
            w.write_record([
                c.mode.label().to_string(),
                if c.with_qcs { "with_qcs" } else { "without_qcs" }.to_string(),
                r.marker.clone(),
                phase.to_string(),
                r.patient.n.to_string(),
                fmt_opt((r.patient.n > 0).then_some(r.patient.mean)),
                fmt_opt((r.patient.n > 1).then_some(r.patient.sd)),
                r.control.n.to_string(),
                fmt_opt((r.control.n > 0).then_some(r.control.mean)),
                fmt_opt((r.control.n > 1).then_some(r.control.sd)),
                fmt_opt(r.test.as_ref().map(|t| t.p_value)),
                r.test.as_ref().map(|t| t.test_kind.label()).unwrap_or("").to_string(),
                r.trend.map(|t| t.arrow()).unwrap_or("").to_string(),
            ])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}
