//! Subject file schema and validation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::analyze::SubjectAnalysis;
use crate::metabolite::PerMetabolite;
use crate::synth::{AcquisitionProtocol, TruthRecord};

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("parse error at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("duplicate subject id {0}")]
    DuplicateId(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A set of frames acquired at one TR. Either raw FIDs, or amplitudes per
/// metabolite and frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrameBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fids: Option<Vec<Vec<Complex64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<PerMetabolite<Vec<f64>>>,
}

impl FrameBlock {
    pub fn n_frames(&self) -> Option<usize> {
        match (&self.fids, &self.amplitudes) {
            (Some(f), _) => Some(f.len()),
            (None, Some(a)) => Some(a.pcr.len()),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RestingData {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub long_tr: Option<FrameBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub short_tr: Option<FrameBlock>,
}

/// The dynamic rest/exercise/recovery series. The amplitude form requires
/// the Pi shift (ppm relative to PCr) per frame.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DynamicBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fids: Option<Vec<Vec<Complex64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub amplitudes: Option<PerMetabolite<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi_shift_ppm: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub group: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, serde_json::Value>,
    #[serde(default)]
    pub protocol: AcquisitionProtocol,
    #[serde(default)]
    pub resting: RestingData,
    pub dynamic: DynamicBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<SubjectAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis_error: Option<String>,
}

/// Frame index ranges of the three protocol phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseRanges {
    pub rest: Range<usize>,
    pub exercise: Range<usize>,
    pub recovery: Range<usize>,
}

impl SubjectRecord {
    pub fn phases(&self) -> PhaseRanges {
        PhaseRanges {
            rest: self.protocol.rest_range(),
            exercise: self.protocol.exercise_range(),
            recovery: self.protocol.recovery_range(),
        }
    }

    /// Checks protocol invariants and frame counts against the protocol.
    pub fn validate(&self) -> Result<(), SchemaError> {
        let p = &self.protocol;
        p.validate().map_err(|e| SchemaError::Protocol(e.to_string()))?;
        if self.id.trim().is_empty() {
            return Err(SchemaError::Protocol("subject id is empty".into()));
        }
        let n = p.n_dynamic();
        let d = &self.dynamic;
        match (&d.fids, &d.amplitudes) {
            (None, None) => {
                return Err(SchemaError::Protocol(
                    "dynamic block needs either fids or amplitudes".into(),
                ))
            }
            (Some(_), Some(_)) => {
                return Err(SchemaError::Protocol(
                    "dynamic block must not carry both fids and amplitudes".into(),
                ))
            }
            (Some(fids), None) => check_fids("dynamic", fids, n, p.n_samples)?,
            (None, Some(amps)) => {
                check_amplitudes("dynamic", amps, n)?;
                match &d.pi_shift_ppm {
                    None => {
                        return Err(SchemaError::Protocol(
                            "dynamic amplitudes require pi_shift_ppm".into(),
                        ))
                    }
                    Some(s) if s.len() != n => {
                        return Err(SchemaError::Protocol(format!(
                            "dynamic pi_shift_ppm has {} frames, protocol expects {n}",
                            s.len()
                        )))
                    }
                    Some(s) if s.iter().any(|v| !v.is_finite()) => {
                        return Err(SchemaError::Protocol("dynamic pi_shift_ppm has non-finite values".into()))
                    }
                    Some(_) => {}
                }
            }
        }
        let blocks = [
            ("resting.long_tr", &self.resting.long_tr, p.n_long),
            ("resting.short_tr", &self.resting.short_tr, p.n_short),
        ];
        for (name, block, expected) in blocks {
            let Some(block) = block else { continue };
            match (&block.fids, &block.amplitudes) {
                (None, None) => {
                    return Err(SchemaError::Protocol(format!("{name} needs fids or amplitudes")))
                }
                (Some(fids), _) => check_fids(name, fids, expected, p.n_samples)?,
                (None, Some(amps)) => check_amplitudes(name, amps, expected)?,
            }
        }
        Ok(())
    }
}

fn check_fids(name: &str, fids: &[Vec<Complex64>], frames: usize, samples: usize) -> Result<(), SchemaError> {
    if fids.len() != frames {
        return Err(SchemaError::Protocol(format!(
            "{name} has {} frames, protocol expects {frames}",
            fids.len()
        )));
    }
    if let Some((k, f)) = fids.iter().enumerate().find(|(_, f)| f.len() != samples) {
        return Err(SchemaError::Protocol(format!(
            "{name} frame {k} has {} samples, protocol expects {samples}",
            f.len()
        )));
    }
    Ok(())
}

fn check_amplitudes(name: &str, amps: &PerMetabolite<Vec<f64>>, frames: usize) -> Result<(), SchemaError> {
    for (m, series) in amps.iter() {
        if series.len() != frames {
            return Err(SchemaError::Protocol(format!(
                "{name} {m} has {} frames, protocol expects {frames}",
                series.len()
            )));
        }
        if series.iter().any(|v| !v.is_finite()) {
            return Err(SchemaError::Protocol(format!("{name} {m} has non-finite values")));
        }
    }
    Ok(())
}

/// Parses and validates one subject document.
pub fn parse_subject(text: &str) -> Result<SubjectRecord, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let record: SubjectRecord = serde_path_to_error::deserialize(de).map_err(|e| SchemaError::Parse {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    record.validate()?;
    Ok(record)
}

pub fn load_subject(path: &Path) -> Result<SubjectRecord, SchemaError> {
    let text = std::fs::read_to_string(path).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_subject(&text)
}

pub fn subject_to_json(record: &SubjectRecord) -> String {
    serde_json::to_string_pretty(record).expect("subject records serialize")
}

pub fn save_subject(record: &SubjectRecord, path: &Path) -> Result<(), SchemaError> {
    std::fs::write(path, subject_to_json(record)).map_err(|source| SchemaError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Rejects cohorts containing repeated subject ids.
pub fn check_unique_ids(records: &[SubjectRecord]) -> Result<(), SchemaError> {
    let mut seen = std::collections::BTreeSet::new();
    for r in records {
        if !seen.insert(r.id.as_str()) {
            return Err(SchemaError::DuplicateId(r.id.clone()));
        }
    }
    Ok(())
}

/// Loads every `*.json` file in a directory, sorted by file name.
pub fn load_cohort_dir(dir: &Path) -> Result<Vec<SubjectRecord>, SchemaError> {
    let io = |source| SchemaError::Io {
        path: dir.display().to_string(),
        source,
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    paths.sort();
    let records = paths.iter().map(|p| load_subject(p)).collect::<Result<Vec<_>, _>>()?;
    check_unique_ids(&records)?;
    Ok(records)
}
