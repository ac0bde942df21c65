use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::subject::{CorruptionPlan, ExerciseTruth, GroundTruth, PhTrajectory, RecoveryTruth};
use super::{default_lineshapes, AcquisitionProtocol, SynthError};
use crate::metabolite::PerMetabolite;

/// Mean and standard deviation of a simulated population parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub sd: f64,
}

impl Moments {
    pub const fn new(mean: f64, sd: f64) -> Self {
        Moments { mean, sd }
    }

    pub const fn fixed(value: f64) -> Self {
        Moments { mean: value, sd: 0.0 }
    }
}

/// Population description for one simulated group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortSpec {
    pub group: String,
    pub size: usize,
    pub tau_pcr_rec: Moments,
    pub tau_pi_rec: Moments,
    pub tau_pcr_ex: Moments,
    pub tau_pi_ex: Moments,
    pub depletion_fraction: Moments,
    pub t1: PerMetabolite<Moments>,
    pub pcr_rest: Moments,
    pub pi_rest: Moments,
    pub atp_rest: Moments,
    pub ph_rest: Moments,
    pub ph_drop: Moments,
    /// Amplitude noise as a coefficient of variation of the observed resting PCr.
    pub noise_rest_cv: f64,
    /// Rescale every drawn parameter so the group's sample mean and SD equal
    /// the requested moments exactly.
    pub exact_moments: bool,
    pub exercise_corruption_fraction: f64,
    pub exercise_spike_frames: usize,
    pub exercise_spike_multiple: f64,
    pub first_point_fraction: f64,
    pub first_point_multiple: f64,
}

impl Default for CohortSpec {
    fn default() -> Self {
        CohortSpec {
            group: "control".into(),
            size: 30,
            tau_pcr_rec: Moments::new(33.11, 8.24),
            tau_pi_rec: Moments::new(28.55, 7.09),
            tau_pcr_ex: Moments::new(34.0, 8.0),
            tau_pi_ex: Moments::new(28.0, 6.0),
            depletion_fraction: Moments::new(0.40, 0.05),
            t1: PerMetabolite {
                pcr: Moments::new(6.10, 0.51),
                pi: Moments::new(5.48, 0.77),
                gatp: Moments::new(5.14, 0.65),
                aatp: Moments::new(3.26, 0.24),
                batp: Moments::new(3.34, 0.38),
            },
            pcr_rest: Moments::new(33.5, 4.0),
            pi_rest: Moments::new(4.3, 0.8),
            atp_rest: Moments::fixed(8.2),
            ph_rest: Moments::new(7.05, 0.02),
            ph_drop: Moments::new(0.05, 0.02),
            noise_rest_cv: 0.03,
            exact_moments: false,
            exercise_corruption_fraction: 0.0,
            exercise_spike_frames: 10,
            exercise_spike_multiple: 60.0,
            first_point_fraction: 0.0,
            first_point_multiple: -60.0,
        }
    }
}

fn draw<R: Rng>(rng: &mut R, n: usize, moments: Moments, exact: bool, floor: f64) -> Vec<f64> {
    let mut z: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if exact && n >= 2 {
        let mean = z.iter().sum::<f64>() / n as f64;
        let sd = (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
        for v in &mut z {
            *v = (*v - mean) / sd;
        }
    }
    z.into_iter()
        .map(|v| (moments.mean + moments.sd * v).max(floor))
        .collect()
}

fn pick<R: Rng>(rng: &mut R, candidates: &mut Vec<usize>, fraction: f64, n: usize) -> Vec<usize> {
    let count = ((fraction * n as f64).round() as usize).min(candidates.len());
    candidates.shuffle(rng);
    let mut chosen: Vec<usize> = candidates.drain(..count).collect();
    chosen.sort_unstable();
    chosen
}

/// Draws ground truths for one group. Exercise-corrupted and first-point-spiked
/// subjects are disjoint.
pub fn draw_cohort(
    spec: &CohortSpec,
    protocol: &AcquisitionProtocol,
    seed: u64,
) -> Result<Vec<GroundTruth>, SynthError> {
    protocol.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.size;
    let exact = spec.exact_moments;

    let tau_pcr_rec = draw(&mut rng, n, spec.tau_pcr_rec, exact, 5.0);
    let tau_pi_rec = draw(&mut rng, n, spec.tau_pi_rec, exact, 5.0);
    let tau_pcr_ex = draw(&mut rng, n, spec.tau_pcr_ex, exact, 8.0);
    let tau_pi_ex = draw(&mut rng, n, spec.tau_pi_ex, exact, 8.0);
    let depletion = draw(&mut rng, n, spec.depletion_fraction, exact, 0.05)
        .into_iter()
        .map(|d| d.min(0.9))
        .collect::<Vec<_>>();
    let t1 = spec.t1.map(|_, &m| draw(&mut rng, n, m, exact, 0.5));
    let pcr = draw(&mut rng, n, spec.pcr_rest, exact, 5.0);
    let pi = draw(&mut rng, n, spec.pi_rest, exact, 0.5);
    let atp = draw(&mut rng, n, spec.atp_rest, exact, 1.0);
    let ph_rest = draw(&mut rng, n, spec.ph_rest, exact, 6.6);
    let ph_drop = draw(&mut rng, n, spec.ph_drop, exact, 0.0);

    let mut candidates: Vec<usize> = (0..n).collect();
    let exercise_corrupted = pick(&mut rng, &mut candidates, spec.exercise_corruption_fraction, n);
    let first_point = pick(&mut rng, &mut candidates, spec.first_point_fraction, n);

    let exercise = protocol.exercise_range();
    let mut truths = Vec::with_capacity(n);
    for i in 0..n {
        let mut corruption = CorruptionPlan::default();
        if exercise_corrupted.binary_search(&i).is_ok() {
            let mut frames: Vec<usize> = exercise.clone().collect();
            frames.shuffle(&mut rng);
            frames.truncate(spec.exercise_spike_frames.min(frames.len()));
            frames.sort_unstable();
            corruption.spike_frames = frames;
            corruption.spike_multiple = spec.exercise_spike_multiple;
        }
        if first_point.binary_search(&i).is_ok() {
            corruption.first_recovery_spike = Some(spec.first_point_multiple);
        }
        let mut truth = GroundTruth {
            resting_amplitudes: PerMetabolite {
                pcr: pcr[i],
                pi: pi[i],
                gatp: atp[i],
                aatp: atp[i],
                batp: atp[i],
            },
            t1: PerMetabolite::from_fn(|m| t1[m][i]),
            exercise: ExerciseTruth {
                tau_pcr: tau_pcr_ex[i],
                tau_pi: tau_pi_ex[i],
                depletion_fraction: depletion[i],
            },
            recovery: RecoveryTruth {
                tau_pcr: tau_pcr_rec[i],
                tau_pi: tau_pi_rec[i],
            },
            ph: PhTrajectory {
                rest: ph_rest[i],
                end_exercise: ph_rest[i] - ph_drop[i],
            },
            noise_sd: 0.0,
            corruption,
            lineshapes: default_lineshapes(),
        };
        truth.noise_sd = truth.noise_for_rest_cv(spec.noise_rest_cv, protocol.tr_dynamic);
        truth.validate(protocol)?;
        truths.push(truth);
    }
    Ok(truths)
}
