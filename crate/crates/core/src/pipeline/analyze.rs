//! Per-subject analysis: quantification, saturation correction, metabolic
//! panels, kinetic fits, markers and QC.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::AnalysisConfig;
use super::markers::{marker_value_map, MarkerValues};
use super::schema::{FrameBlock, SchemaError, SubjectRecord};
use crate::kinetics::{fit_exercise, fit_recovery, KineticFit, KineticsError, OxidativeMarkers};
use crate::metab::{
    depletion_pct, ph_from_shift, total_creatine, ConcentrationScale, MetabError, MetabolicPanel, PanelPhase,
};
use crate::metabolite::{Metabolite, PerMetabolite};
use crate::qc::{self, FirstPointCheck, QcError, QcInputs, QcReport, RecoverySeries};
use crate::quant::{quantify_series, Basis, QuantError};
use crate::relax::{build_panel, correction_factor, estimate_t1_with_errors, CorrectionPanel, RelaxError, T1Mode, T1Panel};
use crate::synth::AcquisitionProtocol;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("quantification: {0}")]
    Quant(#[from] QuantError),
    #[error("T1 correction: {0}")]
    Relax(#[from] RelaxError),
    #[error("metabolic panel: {0}")]
    Metab(#[from] MetabError),
    #[error("kinetics: {0}")]
    Kinetics(#[from] KineticsError),
    #[error("quality control: {0}")]
    Qc(#[from] QcError),
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("subject has not been analyzed")]
    NotAnalyzed,
}

/// Mean resting amplitudes of one TR block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestingMeans {
    pub mean: PerMetabolite<f64>,
    pub std_error: PerMetabolite<f64>,
    pub n_frames: usize,
}

impl RestingMeans {
    fn from_series(series: &PerMetabolite<Vec<f64>>) -> Self {
        let n = series.pcr.len();
        let mean = series.map(|_, s| s.iter().sum::<f64>() / n as f64);
        let std_error = series.map(|m, s| {
            if n < 2 {
                return 0.0;
            }
            let var = s.iter().map(|v| (v - mean[m]).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        });
        RestingMeans {
            mean,
            std_error,
            n_frames: n,
        }
    }
}

/// Observed (saturated) amplitudes after quantification, or as supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredData {
    pub timestamps: Vec<f64>,
    pub amplitudes: PerMetabolite<Vec<f64>>,
    pub pi_shift_ppm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_tr: Option<RestingMeans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_tr: Option<RestingMeans>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSummary {
    pub residual_norms: Vec<f64>,
    pub failed_frames: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KineticFits {
    pub pcr_ex: Option<KineticFit>,
    pub pi_ex: Option<KineticFit>,
    pub pcr_rec: Option<KineticFit>,
    pub pi_rec: Option<KineticFit>,
}

/// Results under one T1 correction mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeAnalysis {
    pub correction: CorrectionPanel,
    pub scale: ConcentrationScale,
    pub rest: MetabolicPanel,
    pub post_exercise: Option<MetabolicPanel>,
    pub post_recovery: Option<MetabolicPanel>,
    pub fits: KineticFits,
    pub recovery_start_index: usize,
    pub oxidative: Option<OxidativeMarkers>,
    pub markers: MarkerValues,
    /// Markers from the original recovery start, kept once a reselection has
    /// been applied.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unreviewed_markers: Option<MarkerValues>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectAnalysis {
    pub primary_mode: T1Mode,
    pub data: MeasuredData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t1_individual: Option<T1Panel>,
    pub modes: BTreeMap<T1Mode, ModeAnalysis>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub mode_errors: BTreeMap<T1Mode, String>,
    pub qc: QcReport,
    pub first_point: Vec<FirstPointCheck>,
}

impl SubjectAnalysis {
    pub fn primary(&self) -> &ModeAnalysis {
        &self.modes[&self.primary_mode]
    }
}

/// Quantified data and the individual T1 estimate; the expensive part of an
/// analysis, shared by all correction modes.
#[derive(Debug, Clone)]
pub struct PreparedSubject {
    pub data: MeasuredData,
    pub quant: Option<QuantSummary>,
    pub t1_individual: Option<T1Panel>,
}

fn block_amplitudes(
    block: &FrameBlock,
    protocol: &AcquisitionProtocol,
    tr: f64,
    basis: &Basis,
    config: &AnalysisConfig,
) -> Result<RestingMeans, AnalysisError> {
    let series = match (&block.amplitudes, &block.fids) {
        (Some(a), _) => a.clone(),
        (None, Some(fids)) => {
            let times: Vec<f64> = (0..fids.len()).map(|k| k as f64 * tr).collect();
            let q = quantify_series(fids, &times, basis, &config.quant)?;
            let _ = protocol;
            PerMetabolite::from_fn(|m| q.iter().map(|f| f.amplitudes[m]).collect())
        }
        (None, None) => return Err(AnalysisError::Configuration("empty resting block".into())),
    };
    Ok(RestingMeans::from_series(&series))
}

/// Quantifies FIDs where present and estimates the individual T1 panel.
pub fn prepare_subject(record: &SubjectRecord, config: &AnalysisConfig) -> Result<PreparedSubject, AnalysisError> {
    record.validate()?;
    let protocol = &record.protocol;
    let basis = Basis::from_lineshapes(&config.lineshapes, protocol)?;
    let timestamps = protocol.timestamps();

    let (amplitudes, pi_shift_ppm, quant) = match (&record.dynamic.amplitudes, &record.dynamic.fids) {
        (Some(a), _) => (
            a.clone(),
            record.dynamic.pi_shift_ppm.clone().unwrap_or_default(),
            None,
        ),
        (None, Some(fids)) => {
            let q = quantify_series(fids, &timestamps, &basis, &config.quant)?;
            let amps = PerMetabolite::from_fn(|m| q.iter().map(|f| f.amplitudes[m]).collect());
            let shifts = q.iter().map(|f| f.shifts_ppm.pi - f.shifts_ppm.pcr).collect();
            let summary = QuantSummary {
                residual_norms: q.iter().map(|f| f.residual_norm).collect(),
                failed_frames: q
                    .iter()
                    .enumerate()
                    .filter(|(_, f)| !f.converged)
                    .map(|(k, _)| k)
                    .collect(),
            };
            (amps, shifts, Some(summary))
        }
        (None, None) => return Err(AnalysisError::Configuration("no dynamic data".into())),
    };

    let long_tr = record
        .resting
        .long_tr
        .as_ref()
        .map(|b| block_amplitudes(b, protocol, protocol.tr_long, &basis, config))
        .transpose()?;
    let short_tr = record
        .resting
        .short_tr
        .as_ref()
        .map(|b| block_amplitudes(b, protocol, protocol.tr_dynamic, &basis, config))
        .transpose()?;

    let t1_individual = match (&long_tr, &short_tr) {
        (Some(l), Some(s)) => Some(estimate_t1_with_errors(
            &l.mean,
            &s.mean,
            Some((&l.std_error, &s.std_error)),
            protocol.tr_long,
            protocol.tr_dynamic,
        )?),
        _ => None,
    };

    Ok(PreparedSubject {
        data: MeasuredData {
            timestamps,
            amplitudes,
            pi_shift_ppm,
            long_tr,
            short_tr,
        },
        quant,
        t1_individual,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_of_valid(v: &[Option<f64>]) -> Option<f64> {
    let valid: Vec<f64> = v.iter().flatten().copied().collect();
    (!valid.is_empty()).then(|| mean(&valid))
}

/// Concentration series (mM) and pH per frame under one correction panel.
struct ModeSeries {
    mm: PerMetabolite<Vec<f64>>,
    ph: Vec<Option<f64>>,
    scale: ConcentrationScale,
}

fn mode_series(
    data: &MeasuredData,
    protocol: &AcquisitionProtocol,
    correction: &CorrectionPanel,
    config: &AnalysisConfig,
) -> Result<ModeSeries, AnalysisError> {
    let corrected = data.amplitudes.map(|m, s| s.iter().map(|a| a * correction.r[m]).collect::<Vec<f64>>());
    // The beta-ATP reference comes from the near fully relaxed long-TR block
    // when available, otherwise from the dynamic rest frames.
    let reference = match &data.long_tr {
        Some(long) => {
            let r_long = correction_factor(correction.t1_panel.t1.batp, protocol.tr_long)?;
            long.mean.batp * r_long
        }
        None => mean(&corrected.batp[protocol.rest_range()]),
    };
    let scale = ConcentrationScale::from_reference(reference, &config.constants)?;
    let mm = corrected.map(|_, s| s.iter().map(|&a| scale.apply(a)).collect());
    let ph = data
        .pi_shift_ppm
        .iter()
        .map(|&s| ph_from_shift(s, &config.constants).ok())
        .collect();
    Ok(ModeSeries { mm, ph, scale })
}

fn fit_or_note<T>(result: Result<T, KineticsError>, what: &str, notes: &mut Vec<String>) -> Option<T> {
    match result {
        Ok(v) => Some(v),
        Err(e) => {
            notes.push(format!("{what}: {e}"));
            None
        }
    }
}

/// Computes panels, fits and markers under one correction panel.
pub fn analyze_mode(
    data: &MeasuredData,
    protocol: &AcquisitionProtocol,
    correction: CorrectionPanel,
    config: &AnalysisConfig,
    recovery_start: usize,
) -> Result<ModeAnalysis, AnalysisError> {
    let series = mode_series(data, protocol, &correction, config)?;
    let c = &config.constants;
    let t = &data.timestamps;
    let (rest, ex, rec) = (protocol.rest_range(), protocol.exercise_range(), protocol.recovery_range());
    let mut notes = Vec::new();

    let pcr_rest = mean(&series.mm.pcr[rest.clone()]);
    let pi_rest = mean(&series.mm.pi[rest.clone()]);
    let atp_rest = mean(&series.mm.batp[rest.clone()]);
    let ph_rest = mean_of_valid(&series.ph[rest.clone()])
        .ok_or_else(|| MetabError::Domain("no rest frame has a Pi shift inside the titration range".into()))?;
    let tcr = total_creatine(pcr_rest, c);
    let rest_panel = MetabolicPanel::build(PanelPhase::Rest, pcr_rest, pi_rest, atp_rest, ph_rest, tcr, c)?;

    let fits = KineticFits {
        pcr_ex: fit_or_note(
            fit_exercise(Metabolite::PCr, &t[ex.clone()], &series.mm.pcr[ex.clone()], 0),
            "PCr exercise fit",
            &mut notes,
        ),
        pi_ex: fit_or_note(
            fit_exercise(Metabolite::Pi, &t[ex.clone()], &series.mm.pi[ex.clone()], 0),
            "Pi exercise fit",
            &mut notes,
        ),
        pcr_rec: fit_or_note(
            fit_recovery(Metabolite::PCr, &t[rec.clone()], &series.mm.pcr[rec.clone()], recovery_start),
            "PCr recovery fit",
            &mut notes,
        ),
        pi_rec: fit_or_note(
            fit_recovery(Metabolite::Pi, &t[rec.clone()], &series.mm.pi[rec.clone()], recovery_start),
            "Pi recovery fit",
            &mut notes,
        ),
    };

    // Post-exercise values are the exercise fits evaluated at the last
    // exercise frame; the raw frame is used when a fit is missing.
    let last_ex = ex.end - 1;
    let t_end = t[last_ex];
    let pcr_post = fits.pcr_ex.as_ref().map_or(series.mm.pcr[last_ex], |f| f.predict(t_end));
    let pi_post = fits.pi_ex.as_ref().map_or(series.mm.pi[last_ex], |f| f.predict(t_end));
    let atp_ex = mean(&series.mm.batp[ex.clone()]);
    let ph_post = series.ph[last_ex];
    let post_exercise = match ph_post {
        Some(ph) if pcr_post > 0.0 => {
            Some(MetabolicPanel::build(PanelPhase::PostExercise, pcr_post, pi_post, atp_ex, ph, tcr, c)?)
        }
        _ => {
            notes.push("post-exercise panel unavailable".into());
            None
        }
    };

    let tail = config.recovery_tail_frames.min(rec.len());
    let ph_rec = mean_of_valid(&series.ph[rec.end - tail..rec.end]);
    let atp_rec = mean(&series.mm.batp[rec.clone()]);
    let post_recovery = match (&fits.pcr_rec, &fits.pi_rec, ph_rec) {
        (Some(p), Some(i), Some(ph)) if p.asymptote > 0.0 => Some(MetabolicPanel::build(
            PanelPhase::PostRecovery,
            p.asymptote,
            i.asymptote,
            atp_rec,
            ph,
            tcr,
            c,
        )?),
        _ => {
            notes.push("post-recovery panel unavailable".into());
            None
        }
    };

    let ph_min = series
        .ph
        .get(ex.start..rec.end)
        .into_iter()
        .flatten()
        .flatten()
        .copied()
        .fold(f64::INFINITY, f64::min);

    let depletion = depletion_pct(pcr_rest, pcr_post).ok();
    let oxidative = match (&fits.pcr_rec, &post_exercise) {
        (Some(rec_fit), Some(post)) if post.adp_um > 0.0 => {
            OxidativeMarkers::compute(pcr_rest - pcr_post, rec_fit.tau, post.adp_um, c.km_adp).ok()
        }
        _ => None,
    };

    let markers = marker_value_map(&super::markers::MarkerInputs {
        rest: &rest_panel,
        post_exercise: post_exercise.as_ref(),
        post_recovery: post_recovery.as_ref(),
        fits: &fits,
        oxidative: oxidative.as_ref(),
        depletion_pct: depletion,
        ph_min: ph_min.is_finite().then_some(ph_min),
    });

    Ok(ModeAnalysis {
        correction,
        scale: series.scale,
        rest: rest_panel,
        post_exercise,
        post_recovery,
        fits,
        recovery_start_index: recovery_start,
        oxidative,
        markers,
        unreviewed_markers: None,
        notes,
    })
}

/// Recovery series (mM) of PCr and Pi under one mode, for QC and review.
pub fn recovery_series(
    data: &MeasuredData,
    protocol: &AcquisitionProtocol,
    mode: &ModeAnalysis,
) -> Vec<RecoverySeries> {
    let rec = protocol.recovery_range();
    [Metabolite::PCr, Metabolite::Pi]
        .into_iter()
        .map(|m| RecoverySeries {
            metabolite: m,
            times: data.timestamps[rec.clone()].to_vec(),
            values: data.amplitudes[m][rec.clone()]
                .iter()
                .map(|a| mode.scale.apply(a * mode.correction.r[m]))
                .collect(),
        })
        .collect()
}

fn exercise_series(data: &MeasuredData, protocol: &AcquisitionProtocol, mode: &ModeAnalysis, m: Metabolite) -> Vec<f64> {
    data.amplitudes[m][protocol.exercise_range()]
        .iter()
        .map(|a| mode.scale.apply(a * mode.correction.r[m]))
        .collect()
}

fn qc_report(
    data: &MeasuredData,
    protocol: &AcquisitionProtocol,
    mode: &ModeAnalysis,
    config: &AnalysisConfig,
) -> Result<(QcReport, Vec<FirstPointCheck>), AnalysisError> {
    let ex_t = &data.timestamps[protocol.exercise_range()];
    let pcr_ex = exercise_series(data, protocol, mode, Metabolite::PCr);
    let pi_ex = exercise_series(data, protocol, mode, Metabolite::Pi);
    let rec = recovery_series(data, protocol, mode);
    let inputs = QcInputs {
        depletion_pct: mode.markers.get("pcr_depletion_pct").copied(),
        pcr_ex: mode.fits.pcr_ex.as_ref().map(|f| (f, ex_t, pcr_ex.as_slice())),
        pi_ex: mode.fits.pi_ex.as_ref().map(|f| (f, ex_t, pi_ex.as_slice())),
        pcr_rec: mode
            .fits
            .pcr_rec
            .as_ref()
            .map(|f| (f, rec[0].times.as_slice(), rec[0].values.as_slice())),
        pi_rec: mode
            .fits
            .pi_rec
            .as_ref()
            .map(|f| (f, rec[1].times.as_slice(), rec[1].values.as_slice())),
    };
    let mut report = qc::score(&qc::variables(&inputs), &config.rubric)?;

    let mut checks = Vec::new();
    for (series, fit) in rec.iter().zip([&mode.fits.pcr_rec, &mode.fits.pi_rec]) {
        if let Some(fit) = fit {
            checks.push(qc::flag_first_point(series, fit));
        }
    }
    report.first_point_flag = checks.iter().any(|c| c.flag);
    report.suggested_start_index = checks.iter().filter_map(|c| c.suggested_index).max();
    Ok((report, checks))
}

/// Runs every available correction mode on prepared data and scores QC on
/// the configured primary mode.
pub fn finish_subject(
    protocol: &AcquisitionProtocol,
    prepared: PreparedSubject,
    config: &AnalysisConfig,
    cohort_t1: Option<&[T1Panel]>,
) -> Result<SubjectAnalysis, AnalysisError> {
    let mut modes = BTreeMap::new();
    let mut mode_errors = BTreeMap::new();
    for mode in T1Mode::ALL {
        let cohort = if mode == T1Mode::CohortMean { cohort_t1 } else { None };
        if mode == T1Mode::CohortMean && cohort.is_none() && config.t1_mode != T1Mode::CohortMean {
            continue;
        }
        let outcome = build_panel(
            mode,
            prepared.t1_individual.as_ref(),
            &config.fixed_t1,
            cohort,
            protocol.tr_dynamic,
        )
        .map_err(AnalysisError::from)
        .and_then(|panel| analyze_mode(&prepared.data, protocol, panel, config, 0));
        match outcome {
            Ok(m) => {
                modes.insert(mode, m);
            }
            Err(e) if mode == config.t1_mode => return Err(e),
            Err(e) => {
                mode_errors.insert(mode, e.to_string());
            }
        }
    }
    let primary = &modes[&config.t1_mode];
    let (qc, first_point) = qc_report(&prepared.data, protocol, primary, config)?;
    Ok(SubjectAnalysis {
        primary_mode: config.t1_mode,
        data: prepared.data,
        quant: prepared.quant,
        t1_individual: prepared.t1_individual,
        modes,
        mode_errors,
        qc,
        first_point,
    })
}

/// Analyzes one subject in place. Errors are recorded on the record as well
/// as returned. Cohort-mean correction needs `cohort_t1`.
pub fn analyze_subject(
    record: &mut SubjectRecord,
    config: &AnalysisConfig,
    cohort_t1: Option<&[T1Panel]>,
) -> Result<(), AnalysisError> {
    let outcome = prepare_subject(record, config)
        .and_then(|p| finish_subject(&record.protocol, p, config, cohort_t1));
    match outcome {
        Ok(a) => {
            record.analysis = Some(a);
            record.analysis_error = None;
            Ok(())
        }
        Err(e) => {
            record.analysis = None;
            record.analysis_error = Some(e.to_string());
            Err(e)
        }
    }
}

/// Analyzes a cohort in parallel. Cohort-mean T1 values are averaged within
/// each group over subjects with an individual estimate. Subject failures are
/// recorded on the records; the number of failures is returned.
pub fn analyze_cohort(records: &mut [SubjectRecord], config: &AnalysisConfig) -> Result<usize, AnalysisError> {
    config
        .validate()
        .map_err(|e| AnalysisError::Configuration(e.to_string()))?;
    let prepared: Vec<Result<PreparedSubject, AnalysisError>> =
        records.par_iter().map(|r| prepare_subject(r, config)).collect();

    let groups: BTreeSet<String> = records.iter().map(|r| r.group.clone()).collect();
    let mut cohort_panels: BTreeMap<String, Vec<T1Panel>> = BTreeMap::new();
    for g in &groups {
        let panels = records
            .iter()
            .zip(&prepared)
            .filter(|(r, _)| &r.group == g)
            .filter_map(|(_, p)| p.as_ref().ok().and_then(|p| p.t1_individual.clone()))
            .collect();
        cohort_panels.insert(g.clone(), panels);
    }

    let outcomes: Vec<Result<SubjectAnalysis, AnalysisError>> = records
        .par_iter()
        .zip(prepared.into_par_iter())
        .map(|(r, p)| {
            let panels = cohort_panels.get(&r.group).filter(|p| !p.is_empty()).map(Vec::as_slice);
            p.and_then(|p| finish_subject(&r.protocol, p, config, panels))
        })
        .collect();

    let mut failures = 0;
    for (r, outcome) in records.iter_mut().zip(outcomes) {
        match outcome {
            Ok(a) => {
                r.analysis = Some(a);
                r.analysis_error = None;
            }
            Err(e) => {
                failures += 1;
                r.analysis = None;
                r.analysis_error = Some(e.to_string());
            }
        }
    }
    Ok(failures)
}

/// Applies an approved recovery start index to every correction mode and
/// rescores QC. Returns the updated analysis without modifying the input.
pub fn reselect_recovery_start(
    analysis: &SubjectAnalysis,
    protocol: &AcquisitionProtocol,
    config: &AnalysisConfig,
    index: usize,
    operator: Option<&str>,
    override_flag: bool,
) -> Result<SubjectAnalysis, AnalysisError> {
    qc::authorize_reselection(&analysis.qc, index, operator, override_flag)?;
    let mut updated = analysis.clone();
    for mode in updated.modes.values_mut() {
        let original = mode
            .unreviewed_markers
            .clone()
            .unwrap_or_else(|| mode.markers.clone());
        let mut redone = analyze_mode(&analysis.data, protocol, mode.correction.clone(), config, index)?;
        redone.unreviewed_markers = Some(original);
        *mode = redone;
    }
    let primary = &analysis.modes[&analysis.primary_mode];
    let series = recovery_series(&analysis.data, protocol, primary);
    let (_, report) = qc::apply_reselection(&analysis.qc, &series, index, operator, override_flag, &config.rubric)?;
    updated.qc = report;
    Ok(updated)
}
