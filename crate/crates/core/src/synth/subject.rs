use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    default_lineshapes, fid_noise_for_amplitude_sd, synth_fid, AcquisitionProtocol, Lineshape,
    MetabolitePeak, SynthError,
};
use crate::metab::{shift_from_ph, MetabolicConstants};
use crate::metabolite::{Metabolite, PerMetabolite};
use crate::pipeline::schema::{DynamicBlock, FrameBlock, RestingData, SubjectRecord};
use crate::relax::saturation_fraction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExerciseTruth {
    pub tau_pcr: f64,
    pub tau_pi: f64,
    /// Asymptotic fraction of resting PCr lost during exercise.
    pub depletion_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryTruth {
    pub tau_pcr: f64,
    pub tau_pi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhTrajectory {
    pub rest: f64,
    pub end_exercise: f64,
}

/// Frames to corrupt after the clean series has been generated. Spike sizes are
/// multiples of the subject's amplitude noise level.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionPlan {
    /// Dynamic frame indices receiving a spike of random sign.
    pub spike_frames: Vec<usize>,
    pub spike_multiple: f64,
    /// Signed spike added to the first recovery frame.
    pub first_recovery_spike: Option<f64>,
}

impl CorruptionPlan {
    pub fn is_clean(&self) -> bool {
        self.spike_frames.is_empty() && self.first_recovery_spike.is_none()
    }
}

/// Everything needed to regenerate a subject, in fully relaxed amplitude units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub resting_amplitudes: PerMetabolite<f64>,
    pub t1: PerMetabolite<f64>,
    pub exercise: ExerciseTruth,
    pub recovery: RecoveryTruth,
    pub ph: PhTrajectory,
    /// Standard deviation of the noise on each observed (saturated) amplitude.
    pub noise_sd: f64,
    #[serde(default)]
    pub corruption: CorruptionPlan,
    #[serde(default = "default_lineshapes")]
    pub lineshapes: PerMetabolite<Lineshape>,
}

impl Default for GroundTruth {
    fn default() -> Self {
        let mut truth = GroundTruth {
            resting_amplitudes: PerMetabolite {
                pcr: 33.5,
                pi: 4.3,
                gatp: 8.2,
                aatp: 8.2,
                batp: 8.2,
            },
            t1: PerMetabolite {
                pcr: 6.10,
                pi: 5.48,
                gatp: 5.14,
                aatp: 3.26,
                batp: 3.34,
            },
            exercise: ExerciseTruth {
                tau_pcr: 34.0,
                tau_pi: 28.0,
                depletion_fraction: 0.4,
            },
            recovery: RecoveryTruth {
                tau_pcr: 33.11,
                tau_pi: 28.55,
            },
            ph: PhTrajectory {
                rest: 7.05,
                end_exercise: 7.0,
            },
            noise_sd: 0.0,
            corruption: CorruptionPlan::default(),
            lineshapes: default_lineshapes(),
        };
        truth.noise_sd = truth.noise_for_rest_cv(0.03, AcquisitionProtocol::default().tr_dynamic);
        truth
    }
}

impl GroundTruth {
    pub fn validate(&self, protocol: &AcquisitionProtocol) -> Result<(), SynthError> {
        let taus = [
            ("exercise.tau_pcr", self.exercise.tau_pcr),
            ("exercise.tau_pi", self.exercise.tau_pi),
            ("recovery.tau_pcr", self.recovery.tau_pcr),
            ("recovery.tau_pi", self.recovery.tau_pi),
        ];
        for (name, tau) in taus {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(SynthError::InvalidTruth(format!("{name} must be > 0")));
            }
        }
        let d = self.exercise.depletion_fraction;
        if !(0.0..1.0).contains(&d) {
            return Err(SynthError::InvalidTruth(format!(
                "depletion fraction must lie in [0, 1), got {d}"
            )));
        }
        if !(self.noise_sd >= 0.0) {
            return Err(SynthError::InvalidTruth("noise_sd must be >= 0".into()));
        }
        for (m, &a) in self.resting_amplitudes.iter() {
            if !(a >= 0.0) {
                return Err(SynthError::InvalidTruth(format!("{m} amplitude must be >= 0")));
            }
        }
        for (m, &t1) in self.t1.iter() {
            if !(t1 > 0.0) {
                return Err(SynthError::InvalidTruth(format!("{m} T1 must be > 0")));
            }
        }
        let n = protocol.n_dynamic();
        if let Some(&bad) = self.corruption.spike_frames.iter().find(|&&k| k >= n) {
            return Err(SynthError::InvalidPlan(format!(
                "spike frame {bad} out of range for {n} dynamic frames"
            )));
        }
        Ok(())
    }

    /// Noise level giving the requested coefficient of variation on the
    /// observed resting PCr amplitude.
    pub fn noise_for_rest_cv(&self, cv: f64, tr: f64) -> f64 {
        cv * self.resting_amplitudes.pcr * saturation_fraction(self.t1.pcr, tr)
    }

    /// Fully relaxed amplitude of every metabolite in every dynamic frame.
    pub fn relaxed_series(&self, protocol: &AcquisitionProtocol) -> PerMetabolite<Vec<f64>> {
        let rest = self.resting_amplitudes;
        let delta = self.exercise.depletion_fraction * rest.pcr;
        let t_end = protocol.n_exercise as f64 * protocol.tr_dynamic;
        let rise = |t: f64, tau: f64| -(-t / tau).exp_m1();
        let pcr_end = rest.pcr - delta * rise(t_end, self.exercise.tau_pcr);
        let pi_end = rest.pi + delta * rise(t_end, self.exercise.tau_pi);

        let mut series = PerMetabolite::from_fn(|m| vec![rest[m]; protocol.n_dynamic()]);
        let t_ex0 = protocol.timestamp(protocol.n_rest);
        for k in protocol.exercise_range() {
            let t = protocol.timestamp(k) - t_ex0;
            series.pcr[k] = rest.pcr - delta * rise(t, self.exercise.tau_pcr);
            series.pi[k] = rest.pi + delta * rise(t, self.exercise.tau_pi);
        }
        let t_rec0 = protocol.timestamp(protocol.n_rest + protocol.n_exercise);
        for k in protocol.recovery_range() {
            let t = protocol.timestamp(k) - t_rec0;
            series.pcr[k] = pcr_end + (rest.pcr - pcr_end) * rise(t, self.recovery.tau_pcr);
            series.pi[k] = pi_end - (pi_end - rest.pi) * rise(t, self.recovery.tau_pi);
        }
        series
    }

    pub fn ph_series(&self, protocol: &AcquisitionProtocol) -> Vec<f64> {
        let PhTrajectory { rest, end_exercise } = self.ph;
        let t_end = protocol.n_exercise as f64 * protocol.tr_dynamic;
        let rise = |t: f64, tau: f64| -(-t / tau).exp_m1();
        let t_ex0 = protocol.timestamp(protocol.n_rest);
        let t_rec0 = protocol.timestamp(protocol.n_rest + protocol.n_exercise);
        (0..protocol.n_dynamic())
            .map(|k| {
                let ts = protocol.timestamp(k);
                if protocol.exercise_range().contains(&k) {
                    let f = rise(ts - t_ex0, self.exercise.tau_pi) / rise(t_end, self.exercise.tau_pi);
                    rest + (end_exercise - rest) * f
                } else if protocol.recovery_range().contains(&k) {
                    end_exercise + (rest - end_exercise) * rise(ts - t_rec0, self.recovery.tau_pi)
                } else {
                    rest
                }
            })
            .collect()
    }

    /// Noiseless observed amplitudes at the dynamic TR.
    pub fn observed_series(&self, protocol: &AcquisitionProtocol) -> PerMetabolite<Vec<f64>> {
        let relaxed = self.relaxed_series(protocol);
        relaxed.map(|m, s| {
            let sat = saturation_fraction(self.t1[m], protocol.tr_dynamic);
            s.iter().map(|a| a * sat).collect()
        })
    }
}

/// Whether a synthetic subject carries raw FIDs or pre-quantified amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataForm {
    #[default]
    Fids,
    Amplitudes,
}

/// Ground truth embedded in a synthetic subject file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub truth: GroundTruth,
    /// Noiseless, uncorrupted observed amplitudes per dynamic frame.
    pub observed_amplitudes: PerMetabolite<Vec<f64>>,
    pub ph: Vec<f64>,
    pub pi_shift_ppm: Vec<f64>,
}

/// Raw FIDs or amplitude series, depending on the requested data form.
type EmittedBlock = (Option<Vec<Vec<Complex64>>>, Option<PerMetabolite<Vec<f64>>>);

struct FrameSynth<'a> {
    truth: &'a GroundTruth,
    protocol: &'a AcquisitionProtocol,
    form: DataForm,
    amplitude_noise: Normal<f64>,
    fid_noise_sd: f64,
}

impl FrameSynth<'_> {
    /// Emits one frame block from per-frame observed amplitudes and Pi shifts.
    fn block(
        &self,
        observed: &[PerMetabolite<f64>],
        pi_shift: &[f64],
        tr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<EmittedBlock, SynthError> {
        match self.form {
            DataForm::Amplitudes => {
                let mut out = PerMetabolite::from_fn(|_| Vec::with_capacity(observed.len()));
                for frame in observed {
                    for m in Metabolite::ALL {
                        let noisy = frame[m] + self.amplitude_noise.sample(rng);
                        out[m].push(noisy);
                    }
                }
                Ok((None, Some(out)))
            }
            DataForm::Fids => {
                let saturation = self
                    .truth
                    .t1
                    .map(|_, &t1| saturation_fraction(t1, tr));
                let mut fids = Vec::with_capacity(observed.len());
                for (frame, &shift) in observed.iter().zip(pi_shift) {
                    let peaks: Vec<MetabolitePeak> = Metabolite::ALL
                        .into_iter()
                        .map(|m| {
                            let shape = self.truth.lineshapes[m];
                            MetabolitePeak {
                                name: m,
                                chemical_shift: if m == Metabolite::Pi { shift } else { shape.shift_ppm },
                                damping: shape.damping,
                                amplitude: frame[m].max(0.0) / saturation[m],
                                phase: shape.phase,
                            }
                        })
                        .collect();
                    fids.push(synth_fid(
                        &peaks,
                        self.protocol,
                        &saturation,
                        self.fid_noise_sd,
                        rng,
                    )?);
                }
                Ok((Some(fids), None))
            }
        }
    }
}

/// Generates a complete subject: resting long/short-TR frames, the dynamic
/// series and the embedded truth record. Deterministic in `seed`.
pub fn synth_subject(
    id: &str,
    group: &str,
    truth: &GroundTruth,
    protocol: &AcquisitionProtocol,
    seed: u64,
    form: DataForm,
) -> Result<SubjectRecord, SynthError> {
    protocol.validate()?;
    truth.validate(protocol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let constants = MetabolicConstants::default();

    let clean = truth.observed_series(protocol);
    let ph = truth.ph_series(protocol);
    let pi_shift: Vec<f64> = ph.iter().map(|&p| shift_from_ph(p, &constants)).collect();
    let n = protocol.n_dynamic();

    let mut frames: Vec<PerMetabolite<f64>> = (0..n)
        .map(|k| PerMetabolite::from_fn(|m| clean[m][k]))
        .collect();
    for &k in &truth.corruption.spike_frames {
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let spike = sign * truth.corruption.spike_multiple * truth.noise_sd;
        frames[k].pcr = (frames[k].pcr + spike).max(0.0);
        frames[k].pi = (frames[k].pi + spike).max(0.0);
    }
    if let Some(multiple) = truth.corruption.first_recovery_spike {
        let k = protocol.recovery_range().start;
        let spike = multiple * truth.noise_sd;
        frames[k].pcr = (frames[k].pcr + spike).max(0.0);
        frames[k].pi = (frames[k].pi + spike).max(0.0);
    }

    let synth = FrameSynth {
        truth,
        protocol,
        form,
        amplitude_noise: Normal::new(0.0, truth.noise_sd).expect("validated noise sd"),
        fid_noise_sd: fid_noise_for_amplitude_sd(
            truth.noise_sd,
            truth.lineshapes.pcr.damping,
            protocol,
        ),
    };

    let rest_shift = shift_from_ph(truth.ph.rest, &constants);
    let resting_frames = |tr: f64, count: usize| {
        let amps = truth
            .resting_amplitudes
            .map(|m, &a| a * saturation_fraction(truth.t1[m], tr));
        (vec![amps; count], vec![rest_shift; count])
    };
    let (long_amps, long_shift) = resting_frames(protocol.tr_long, protocol.n_long);
    let (long_fids, long_values) = synth.block(&long_amps, &long_shift, protocol.tr_long, &mut rng)?;
    let (short_amps, short_shift) = resting_frames(protocol.tr_dynamic, protocol.n_short);
    let (short_fids, short_values) =
        synth.block(&short_amps, &short_shift, protocol.tr_dynamic, &mut rng)?;
    let (dyn_fids, dyn_values) = synth.block(&frames, &pi_shift, protocol.tr_dynamic, &mut rng)?;

    let dynamic = DynamicBlock {
        pi_shift_ppm: dyn_values.as_ref().map(|_| pi_shift.clone()),
        fids: dyn_fids,
        amplitudes: dyn_values,
    };

    Ok(SubjectRecord {
        id: id.to_string(),
        group: group.to_string(),
        metadata: Default::default(),
        protocol: protocol.clone(),
        resting: RestingData {
            long_tr: Some(FrameBlock {
                fids: long_fids,
                amplitudes: long_values,
            }),
            short_tr: Some(FrameBlock {
                fids: short_fids,
                amplitudes: short_values,
            }),
        },
        dynamic,
        truth: Some(TruthRecord {
            truth: truth.clone(),
            observed_amplitudes: clean,
            ph,
            pi_shift_ppm: pi_shift,
        }),
        analysis: None,
        analysis_error: None,
    })
}
