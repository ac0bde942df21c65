use std::collections::BTreeMap;
use std::path::PathBuf;

use p31_core::kinetics::KineticFit;
use p31_core::metabolite::Metabolite;
use p31_core::pipeline::analyze::{recovery_series, reselect_recovery_start};
use p31_core::pipeline::schema::check_unique_ids;
use p31_core::pipeline::{cohort_report, AnalysisConfig, CohortReport, SubjectRecord};
use p31_core::qc::{Decision, QcReport};
use p31_core::relax::T1Mode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of samples in the fitted-curve overlay of the recovery view.
pub const OVERLAY_SAMPLES: usize = 200;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown subject {0}")]
    NotFound(String),
    #[error("subject {0} has no analysis")]
    NotAnalyzed(String),
    #[error("subject {id} changed at revision {subject_revision}; request was based on revision {requested}")]
    Conflict {
        id: String,
        requested: u64,
        subject_revision: u64,
    },
    #[error("{0}")]
    Rejected(String),
    #[error("invalid cohort: {0}")]
    InvalidCohort(String),
    #[error("cannot write snapshot {path}: {source}")]
    Snapshot {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatusFilter {
    #[default]
    All,
    /// First recovery point flagged, reviewed or not.
    Flagged,
    /// Flagged and not yet reviewed.
    Pending,
    /// Subject or exercise phase excluded by QC.
    Excluded,
    /// Analysis failed.
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSummary {
    pub id: String,
    pub group: String,
    pub first_point_flag: bool,
    pub pending_review: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub suggested_start_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reselected_start_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_total_exercise: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_total_recovery: Option<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exercise_decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_error: Option<String>,
    /// Cohort revision at which this subject last changed.
    pub subject_revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesView {
    pub metabolite: Metabolite,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<KineticFit>,
    pub overlay_times: Vec<f64>,
    pub overlay_values: Vec<f64>,
    /// Standardized residuals; `null` before the fit's start index.
    pub standardized_residuals: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryView {
    pub id: String,
    pub group: String,
    pub mode: T1Mode,
    pub start_index: usize,
    pub subject_revision: u64,
    pub series: Vec<SeriesView>,
    pub qc: QcReport,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ReselectRequest {
    pub index: usize,
    #[serde(default)]
    pub operator: Option<String>,
    #[serde(default, rename = "override")]
    pub override_flag: bool,
    #[serde(default)]
    pub dry_run: bool,
    /// Cohort revision the client based its decision on.
    #[serde(default)]
    pub revision: Option<u64>,
}

/// In-memory cohort state behind the service.
pub struct Store {
    revision: u64,
    records: BTreeMap<String, SubjectRecord>,
    subject_revision: BTreeMap<String, u64>,
    config: AnalysisConfig,
    patient_group: String,
    control_group: String,
    snapshot: Option<PathBuf>,
    report: CohortReport,
}

impl Store {
    pub fn new(
        records: Vec<SubjectRecord>,
        config: AnalysisConfig,
        patient_group: &str,
        control_group: &str,
        snapshot: Option<PathBuf>,
    ) -> Result<Self, StoreError> {
        check_unique_ids(&records).map_err(|e| StoreError::InvalidCohort(e.to_string()))?;
        let report = cohort_report(&records, patient_group, control_group, config.alpha);
        let subject_revision = records.iter().map(|r| (r.id.clone(), 0)).collect();
        Ok(Store {
            revision: 0,
            records: records.into_iter().map(|r| (r.id.clone(), r)).collect(),
            subject_revision,
            config,
            patient_group: patient_group.to_string(),
            control_group: control_group.to_string(),
            snapshot,
            report,
        })
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn report(&self) -> &CohortReport {
        &self.report
    }

    pub fn records(&self) -> impl Iterator<Item = &SubjectRecord> {
        self.records.values()
    }

    fn summary(&self, r: &SubjectRecord) -> SubjectSummary {
        let qc = r.analysis.as_ref().map(|a| &a.qc);
        SubjectSummary {
            id: r.id.clone(),
            group: r.group.clone(),
            first_point_flag: qc.is_some_and(|q| q.first_point_flag),
            pending_review: qc.is_some_and(|q| q.pending_review()),
            suggested_start_index: qc.and_then(|q| q.suggested_start_index),
            reselected_start_index: qc.and_then(|q| q.reselected_start_index),
            score_total_exercise: qc.map(|q| q.score_total_exercise),
            score_total_recovery: qc.map(|q| q.score_total_recovery),
            exercise_decision: qc.map(|q| q.exercise_decision),
            subject_decision: qc.map(|q| q.subject_decision),
            analysis_error: r.analysis_error.clone(),
            subject_revision: self.subject_revision[&r.id],
        }
    }

    pub fn list(&self, filter: StatusFilter) -> Vec<SubjectSummary> {
        self.records
            .values()
            .map(|r| self.summary(r))
            .filter(|s| match filter {
                StatusFilter::All => true,
                StatusFilter::Flagged => s.first_point_flag,
                StatusFilter::Pending => s.pending_review,
                StatusFilter::Excluded => {
                    s.exercise_decision == Some(Decision::Excluded) || s.subject_decision == Some(Decision::Excluded)
                }
                StatusFilter::Failed => s.analysis_error.is_some(),
            })
            .collect()
    }

    fn record(&self, id: &str) -> Result<&SubjectRecord, StoreError> {
        self.records.get(id).ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    pub fn recovery_view(&self, id: &str) -> Result<RecoveryView, StoreError> {
        let r = self.record(id)?;
        build_view(r, self.subject_revision[id])
    }

    /// Applies (or previews, for a dry run) a recovery start reselection.
    pub fn reselect(&mut self, id: &str, req: &ReselectRequest) -> Result<RecoveryView, StoreError> {
        let r = self.record(id)?;
        let changed_at = self.subject_revision[id];
        if let Some(requested) = req.revision {
            if requested < changed_at {
                return Err(StoreError::Conflict {
                    id: id.to_string(),
                    requested,
                    subject_revision: changed_at,
                });
            }
        }
        let analysis = r.analysis.as_ref().ok_or_else(|| StoreError::NotAnalyzed(id.to_string()))?;
        let updated = reselect_recovery_start(
            analysis,
            &r.protocol,
            &self.config,
            req.index,
            req.operator.as_deref(),
            req.override_flag,
        )
        .map_err(|e| StoreError::Rejected(e.to_string()))?;

        let mut record = r.clone();
        record.analysis = Some(updated);
        if req.dry_run {
            return build_view(&record, changed_at);
        }
        let next = self.revision + 1;
        let previous = self.records.insert(id.to_string(), record).expect("record exists");
        if let Err(e) = self.write_snapshot() {
            self.records.insert(id.to_string(), previous);
            return Err(e);
        }
        self.revision = next;
        self.subject_revision.insert(id.to_string(), next);
        let records: Vec<SubjectRecord> = self.records.values().cloned().collect();
        self.report = cohort_report(&records, &self.patient_group, &self.control_group, self.config.alpha);
        self.recovery_view(id)
    }

    fn write_snapshot(&self) -> Result<(), StoreError> {
        let Some(path) = &self.snapshot else { return Ok(()) };
        let err = |source| StoreError::Snapshot {
            path: path.display().to_string(),
            source,
        };
        let records: Vec<&SubjectRecord> = self.records.values().collect();
        let text = serde_json::to_string_pretty(&records).expect("records serialize");
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text).map_err(err)?;
        std::fs::rename(&tmp, path).map_err(err)
    }
}

fn build_view(r: &SubjectRecord, subject_revision: u64) -> Result<RecoveryView, StoreError> {
    let a = r.analysis.as_ref().ok_or_else(|| StoreError::NotAnalyzed(r.id.clone()))?;
    let mode = a.primary();
    let series = recovery_series(&a.data, &r.protocol, mode)
        .into_iter()
        .map(|s| {
            let fit = match s.metabolite {
                Metabolite::PCr => mode.fits.pcr_rec.clone(),
                _ => mode.fits.pi_rec.clone(),
            };
            let (overlay_times, overlay_values, residuals) = match &fit {
                Some(f) => {
                    let t0 = s.times[f.start_index];
                    let t1 = *s.times.last().expect("non-empty recovery");
                    let ts: Vec<f64> = (0..OVERLAY_SAMPLES)
                        .map(|k| t0 + (t1 - t0) * k as f64 / (OVERLAY_SAMPLES - 1) as f64)
                        .collect();
                    let vs = ts.iter().map(|&t| f.predict(t)).collect();
                    let z = f.standardized_residuals(&s.times, &s.values);
                    let mut res = vec![None; f.start_index];
                    res.extend(z.into_iter().map(Some));
                    (ts, vs, res)
                }
                None => (Vec::new(), Vec::new(), vec![None; s.times.len()]),
            };
            SeriesView {
                metabolite: s.metabolite,
                times: s.times,
                values: s.values,
                fit,
                overlay_times,
                overlay_values,
                standardized_residuals: residuals,
            }
        })
        .collect();
    Ok(RecoveryView {
        id: r.id.clone(),
        group: r.group.clone(),
        mode: a.primary_mode,
        start_index: mode.recovery_start_index,
        subject_revision,
        series,
        qc: a.qc.clone(),
    })
}
