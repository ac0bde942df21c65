//! Synthetic phosphorus-31 FIDs and full dynamic-protocol subjects with known
//! ground truth.

mod cohort;
mod subject;

pub use cohort::{draw_cohort, CohortSpec, Moments};
pub use subject::{
    synth_subject, CorruptionPlan, DataForm, ExerciseTruth, GroundTruth, PhTrajectory,
    RecoveryTruth, TruthRecord,
};

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metabolite::{Metabolite, PerMetabolite};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid protocol: {0}")]
    InvalidProtocol(String),
    #[error("invalid ground truth: {0}")]
    InvalidTruth(String),
    #[error("invalid corruption plan: {0}")]
    InvalidPlan(String),
}

/// One Lorentzian resonance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetabolitePeak {
    pub name: Metabolite,
    /// ppm relative to PCr.
    pub chemical_shift: f64,
    /// Exponential damping constant (s^-1).
    pub damping: f64,
    pub amplitude: f64,
    /// Zero-order phase (radians).
    pub phase: f64,
}

impl MetabolitePeak {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(self.amplitude >= 0.0) || !(self.damping > 0.0) || !self.chemical_shift.is_finite() {
            return Err(SynthError::InvalidTruth(format!(
                "peak {} needs amplitude >= 0, damping > 0 and a finite shift",
                self.name
            )));
        }
        Ok(())
    }
}

/// Position and width of a resonance, without an amplitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lineshape {
    pub shift_ppm: f64,
    pub damping: f64,
    #[serde(default)]
    pub phase: f64,
}

/// Standard resonance positions (ppm from PCr) and Lorentzian dampings.
pub fn default_lineshapes() -> PerMetabolite<Lineshape> {
    let at = |shift_ppm, damping| Lineshape {
        shift_ppm,
        damping,
        phase: 0.0,
    };
    PerMetabolite {
        pcr: at(0.0, 20.0),
        pi: at(4.9, 25.0),
        gatp: at(-2.5, 40.0),
        aatp: at(-7.5, 40.0),
        batp: at(-16.1, 45.0),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionProtocol {
    pub tr_dynamic: f64,
    pub n_rest: usize,
    pub n_exercise: usize,
    pub n_recovery: usize,
    pub tr_long: f64,
    pub n_long: usize,
    pub n_short: usize,
    /// MHz.
    pub spectrometer_freq: f64,
    pub n_samples: usize,
    /// Seconds between FID samples.
    pub dwell_time: f64,
}

impl Default for AcquisitionProtocol {
    fn default() -> Self {
        AcquisitionProtocol {
            tr_dynamic: 4.0,
            n_rest: 10,
            n_exercise: 30,
            n_recovery: 90,
            tr_long: 30.0,
            n_long: 12,
            n_short: 32,
            spectrometer_freq: 49.9,
            n_samples: 256,
            dwell_time: 0.5e-3,
        }
    }
}

impl AcquisitionProtocol {
    pub fn validate(&self) -> Result<(), SynthError> {
        let counts = [
            ("n_rest", self.n_rest),
            ("n_exercise", self.n_exercise),
            ("n_recovery", self.n_recovery),
            ("n_long", self.n_long),
            ("n_short", self.n_short),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(SynthError::InvalidProtocol(format!("{name} must be >= 1")));
            }
        }
        if !(self.tr_dynamic > 0.0) {
            return Err(SynthError::InvalidProtocol("tr_dynamic must be > 0".into()));
        }
        if !(self.tr_long > self.tr_dynamic) {
            return Err(SynthError::InvalidProtocol(
                "tr_long must exceed tr_dynamic".into(),
            ));
        }
        self.validate_sampling()
    }

    fn validate_sampling(&self) -> Result<(), SynthError> {
        if self.n_samples < 2 {
            return Err(SynthError::InvalidProtocol("n_samples must be >= 2".into()));
        }
        if !(self.dwell_time > 0.0) {
            return Err(SynthError::InvalidProtocol("dwell_time must be > 0".into()));
        }
        if !(self.spectrometer_freq > 0.0) {
            return Err(SynthError::InvalidProtocol(
                "spectrometer_freq must be > 0".into(),
            ));
        }
        Ok(())
    }

    pub fn n_dynamic(&self) -> usize {
        self.n_rest + self.n_exercise + self.n_recovery
    }

    pub fn rest_range(&self) -> Range<usize> {
        0..self.n_rest
    }

    pub fn exercise_range(&self) -> Range<usize> {
        self.n_rest..self.n_rest + self.n_exercise
    }

    pub fn recovery_range(&self) -> Range<usize> {
        self.n_rest + self.n_exercise..self.n_dynamic()
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 * self.tr_dynamic
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.n_dynamic()).map(|k| self.timestamp(k)).collect()
    }

    /// Sample times of one FID.
    pub fn sample_times(&self) -> Vec<f64> {
        (0..self.n_samples)
            .map(|k| k as f64 * self.dwell_time)
            .collect()
    }

    pub fn ppm_to_hz(&self, ppm: f64) -> f64 {
        ppm * self.spectrometer_freq
    }
}

/// Noiseless signal of a single unit-amplitude resonance at time `t`.
pub fn lorentzian(shift_hz: f64, damping: f64, phase: f64, t: f64) -> Complex64 {
    Complex64::new(-damping * t, 2.0 * PI * shift_hz * t + phase).exp()
}

/// Noiseless FID of a set of peaks scaled by per-metabolite saturation factors.
pub fn fid_model(
    peaks: &[MetabolitePeak],
    protocol: &AcquisitionProtocol,
    saturation: &PerMetabolite<f64>,
) -> Vec<Complex64> {
    protocol
        .sample_times()
        .into_iter()
        .map(|t| {
            peaks
                .iter()
                .map(|p| {
                    let shift_hz = protocol.ppm_to_hz(p.chemical_shift);
                    lorentzian(shift_hz, p.damping, p.phase, t) * (p.amplitude * saturation[p.name])
                })
                .sum()
        })
        .collect()
}

/// Synthesizes one FID: the sum of saturated Lorentzian peaks plus complex
/// Gaussian noise with standard deviation `noise_sd` on each of the real and
/// imaginary channels.
pub fn synth_fid<R: Rng + ?Sized>(
    peaks: &[MetabolitePeak],
    protocol: &AcquisitionProtocol,
    saturation: &PerMetabolite<f64>,
    noise_sd: f64,
    rng: &mut R,
) -> Result<Vec<Complex64>, SynthError> {
    protocol.validate_sampling()?;
    for p in peaks {
        p.validate()?;
    }
    for (m, &s) in saturation.iter() {
        if !(s > 0.0 && s <= 1.0) {
            return Err(SynthError::InvalidTruth(format!(
                "saturation factor for {m} must lie in (0, 1], got {s}"
            )));
        }
    }
    if !(noise_sd >= 0.0) {
        return Err(SynthError::InvalidTruth("noise_sd must be >= 0".into()));
    }
    let mut fid = fid_model(peaks, protocol, saturation);
    if noise_sd > 0.0 {
        let normal = Normal::new(0.0, noise_sd).expect("finite noise sd");
        for z in &mut fid {
            *z += Complex64::new(normal.sample(rng), normal.sample(rng));
        }
    }
    Ok(fid)
}

/// Time-domain noise level giving amplitude noise `amplitude_sd` on a real-amplitude
/// least-squares estimate against a unit template with the given damping.
pub fn fid_noise_for_amplitude_sd(
    amplitude_sd: f64,
    damping: f64,
    protocol: &AcquisitionProtocol,
) -> f64 {
    let energy: f64 = protocol
        .sample_times()
        .iter()
        .map(|&t| (-2.0 * damping * t).exp())
        .sum();
    amplitude_sd * energy.sqrt()
}
