//! Time-domain quantification of FIDs against a metabolite basis.
//!
//! Each frame is fitted as a sum of unit templates with real amplitudes. The
//! template frequencies (and optionally dampings) are nonlinear parameters
//! restricted to per-metabolite windows: a coarse coordinate-wise grid picks a
//! start, then a Levenberg-Marquardt refinement solves amplitudes and
//! frequencies jointly. Amplitudes are clamped at zero afterwards.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metabolite::{Metabolite, PerMetabolite};
use crate::synth::{AcquisitionProtocol, Lineshape, MetabolitePeak};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("FID has {got} samples, basis expects {expected}")]
    SamplingMismatch { expected: usize, got: usize },
    #[error("fit did not converge after {iterations} iterations (residual {residual_norm:.3e})", residual_norm = best.residual_norm)]
    FitFailure {
        iterations: usize,
        best: Box<FrameQuant>,
    },
    #[error("no frames to quantify")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTemplate {
    pub name: Metabolite,
    pub shift_ppm: f64,
    pub damping: f64,
    #[serde(default)]
    pub phase: f64,
    /// Allowed shift offset from `shift_ppm`, as (low, high) in ppm.
    pub shift_window: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basis {
    pub templates: Vec<BasisTemplate>,
    /// Allowed multiplier on each template's damping when damping is fitted.
    pub damping_window: (f64, f64),
    pub n_samples: usize,
    pub dwell_time: f64,
    pub spectrometer_freq: f64,
}

impl Basis {
    pub fn new(
        templates: Vec<BasisTemplate>,
        damping_window: (f64, f64),
        protocol: &AcquisitionProtocol,
    ) -> Result<Self, QuantError> {
        let basis = Basis {
            templates,
            damping_window,
            n_samples: protocol.n_samples,
            dwell_time: protocol.dwell_time,
            spectrometer_freq: protocol.spectrometer_freq,
        };
        basis.validate()?;
        Ok(basis)
    }

    /// Templates at the given lineshapes with default shift windows: wide for
    /// Pi (pH 6.3 to 7.5) and narrow elsewhere.
    pub fn from_lineshapes(
        lineshapes: &PerMetabolite<Lineshape>,
        protocol: &AcquisitionProtocol,
    ) -> Result<Self, QuantError> {
        let templates = Metabolite::ALL
            .into_iter()
            .map(|m| {
                let shape = lineshapes[m];
                let shift_window = match m {
                    Metabolite::Pi => (3.85 - shape.shift_ppm, 5.65 - shape.shift_ppm),
                    _ => (-0.2, 0.2),
                };
                BasisTemplate {
                    name: m,
                    shift_ppm: shape.shift_ppm,
                    damping: shape.damping,
                    phase: shape.phase,
                    shift_window,
                }
            })
            .collect();
        Basis::new(templates, (0.5, 2.0), protocol)
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        if self.templates.is_empty() {
            return Err(QuantError::InvalidBasis("no templates".into()));
        }
        for (i, t) in self.templates.iter().enumerate() {
            if self.templates[..i].iter().any(|o| o.name == t.name) {
                return Err(QuantError::InvalidBasis(format!("duplicate template {}", t.name)));
            }
            let (lo, hi) = t.shift_window;
            if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(QuantError::InvalidBasis(format!(
                    "empty shift window for {}",
                    t.name
                )));
            }
            if !(t.damping > 0.0) {
                return Err(QuantError::InvalidBasis(format!(
                    "damping must be > 0 for {}",
                    t.name
                )));
            }
        }
        let (lo, hi) = self.damping_window;
        if !(lo > 0.0 && lo <= hi) {
            return Err(QuantError::InvalidBasis("empty damping window".into()));
        }
        if self.n_samples < 2 || !(self.dwell_time > 0.0) || !(self.spectrometer_freq > 0.0) {
            return Err(QuantError::InvalidBasis("invalid sampling grid".into()));
        }
        Ok(())
    }

    /// Unit-amplitude peak for a template, suitable for [`crate::synth::fid_model`].
    pub fn template_peak(&self, index: usize) -> MetabolitePeak {
        let t = &self.templates[index];
        MetabolitePeak {
            name: t.name,
            chemical_shift: t.shift_ppm,
            damping: t.damping,
            amplitude: 1.0,
            phase: t.phase,
        }
    }

    fn column(&self, index: usize, offset_ppm: f64, damping_mult: f64) -> Vec<Complex64> {
        let t = &self.templates[index];
        let freq_hz = (t.shift_ppm + offset_ppm) * self.spectrometer_freq;
        let step = Complex64::new(
            -t.damping * damping_mult * self.dwell_time,
            2.0 * PI * freq_hz * self.dwell_time,
        )
        .exp();
        let mut value = Complex64::from_polar(1.0, t.phase);
        let mut col = Vec::with_capacity(self.n_samples);
        for _ in 0..self.n_samples {
            col.push(value);
            value *= step;
        }
        col
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantConfig {
    pub fit_damping: bool,
    pub grid_step_ppm: f64,
    pub grid_sweeps: usize,
    pub max_iterations: usize,
    /// Relative change in residual sum of squares that ends the refinement.
    pub tolerance: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig {
            fit_damping: false,
            grid_step_ppm: 0.05,
            grid_sweeps: 2,
            max_iterations: 200,
            tolerance: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameQuant {
    pub amplitudes: PerMetabolite<f64>,
    /// Amplitudes before clamping at zero.
    pub raw_amplitudes: PerMetabolite<f64>,
    /// Fitted absolute resonance positions (ppm).
    pub shifts_ppm: PerMetabolite<f64>,
    pub damping_multipliers: PerMetabolite<f64>,
    /// ||fid - model|| / ||fid||.
    pub residual_norm: f64,
    pub timestamp: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Nonlinear parameters of a fit, used to warm-start the next frame.
#[derive(Debug, Clone, PartialEq)]
pub struct NonlinearStart {
    pub offsets_ppm: Vec<f64>,
    pub damping_mults: Vec<f64>,
}

fn dot(a: &[Complex64], b: &[Complex64]) -> f64 {
    // Re(a^H b)
    a.iter().zip(b).map(|(x, y)| x.re * y.re + x.im * y.im).sum()
}

fn norm_sqr(a: &[Complex64]) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum()
}

fn solve_spd(matrix: DMatrix<f64>, rhs: DVector<f64>) -> Option<DVector<f64>> {
    match matrix.clone().cholesky() {
        Some(ch) => Some(ch.solve(&rhs)),
        None => matrix.lu().solve(&rhs),
    }
}

/// Real least-squares amplitudes of `fid` on `columns`, restricted to `active`.
fn linear_amplitudes(columns: &[Vec<Complex64>], fid: &[Complex64], active: &[bool]) -> Vec<f64> {
    let idx: Vec<usize> = (0..columns.len()).filter(|&i| active[i]).collect();
    let mut amps = vec![0.0; columns.len()];
    if idx.is_empty() {
        return amps;
    }
    let k = idx.len();
    let gram = DMatrix::from_fn(k, k, |r, c| dot(&columns[idx[r]], &columns[idx[c]]));
    let rhs = DVector::from_fn(k, |r, _| dot(&columns[idx[r]], fid));
    if let Some(sol) = solve_spd(gram, rhs) {
        for (j, &i) in idx.iter().enumerate() {
            amps[i] = sol[j];
        }
    }
    amps
}

fn residual_ssq(columns: &[Vec<Complex64>], amps: &[f64], fid: &[Complex64]) -> f64 {
    fid.iter()
        .enumerate()
        .map(|(k, y)| {
            let model: Complex64 = columns.iter().zip(amps).map(|(c, a)| c[k] * a).sum();
            (y - model).norm_sqr()
        })
        .sum()
}

fn grid_candidates(window: (f64, f64), step: f64) -> Vec<f64> {
    let (lo, hi) = window;
    let mut out = vec![lo, hi];
    if step > 0.0 {
        let first = (lo / step).ceil() as i64;
        let last = (hi / step).floor() as i64;
        for k in first..=last {
            out.push(k as f64 * step);
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

struct Fitter<'a> {
    basis: &'a Basis,
    config: &'a QuantConfig,
    fid: &'a [Complex64],
}

impl Fitter<'_> {
    fn columns(&self, offsets: &[f64], dmults: &[f64]) -> Vec<Vec<Complex64>> {
        (0..self.basis.templates.len())
            .map(|i| self.basis.column(i, offsets[i], dmults[i]))
            .collect()
    }

    /// Coordinate-wise grid search over each shift window with the amplitudes
    /// profiled out by linear least squares.
    fn grid_start(&self) -> NonlinearStart {
        let m = self.basis.templates.len();
        let mut offsets: Vec<f64> = self
            .basis
            .templates
            .iter()
            .map(|t| 0.0f64.clamp(t.shift_window.0, t.shift_window.1))
            .collect();
        let dmults = vec![1.0f64.clamp(self.basis.damping_window.0, self.basis.damping_window.1); m];
        let mut columns = self.columns(&offsets, &dmults);
        let all = vec![true; m];
        let fid_energy = norm_sqr(self.fid);

        let profiled_ssq = |columns: &[Vec<Complex64>]| {
            let amps = linear_amplitudes(columns, self.fid, &all);
            let explained: f64 = amps
                .iter()
                .zip(columns)
                .map(|(a, c)| a * dot(c, self.fid))
                .sum();
            fid_energy - explained
        };

        for _ in 0..self.config.grid_sweeps.max(1) {
            for i in 0..m {
                let mut best = (profiled_ssq(&columns), offsets[i]);
                for cand in grid_candidates(self.basis.templates[i].shift_window, self.config.grid_step_ppm) {
                    columns[i] = self.basis.column(i, cand, dmults[i]);
                    let ssq = profiled_ssq(&columns);
                    if ssq < best.0 {
                        best = (ssq, cand);
                    }
                }
                offsets[i] = best.1;
                columns[i] = self.basis.column(i, offsets[i], dmults[i]);
            }
        }
        NonlinearStart {
            offsets_ppm: offsets,
            damping_mults: dmults,
        }
    }

    /// Joint Levenberg-Marquardt refinement of amplitudes and nonlinear
    /// parameters. Returns (amplitudes, offsets, dmults, iterations, converged).
    fn refine(&self, start: NonlinearStart) -> (Vec<f64>, Vec<f64>, Vec<f64>, usize, bool) {
        let m = self.basis.templates.len();
        let fit_damping = self.config.fit_damping;
        let n_par = if fit_damping { 3 * m } else { 2 * m };
        let times: Vec<f64> = (0..self.basis.n_samples)
            .map(|k| k as f64 * self.basis.dwell_time)
            .collect();
        let omega = 2.0 * PI * self.basis.spectrometer_freq;

        let mut offsets = start.offsets_ppm;
        let mut dmults = start.damping_mults;
        let mut columns = self.columns(&offsets, &dmults);
        let mut amps = linear_amplitudes(&columns, self.fid, &vec![true; m]);
        let mut ssq = residual_ssq(&columns, &amps, self.fid);
        let floor = 1e-30 * norm_sqr(self.fid);
        let mut lambda = 1e-3;

        for iter in 1..=self.config.max_iterations {
            if ssq <= floor {
                return (amps, offsets, dmults, iter - 1, true);
            }
            // Model derivatives per parameter.
            let mut jac: Vec<Vec<Complex64>> = Vec::with_capacity(n_par);
            for col in &columns {
                jac.push(col.clone());
            }
            for i in 0..m {
                let scale = Complex64::new(0.0, omega * amps[i]);
                jac.push(columns[i].iter().zip(&times).map(|(c, &t)| c * scale * t).collect());
            }
            if fit_damping {
                for i in 0..m {
                    let d = self.basis.templates[i].damping * amps[i];
                    jac.push(columns[i].iter().zip(&times).map(|(c, &t)| c * (-d * t)).collect());
                }
            }
            let residual: Vec<Complex64> = self
                .fid
                .iter()
                .enumerate()
                .map(|(k, y)| y - columns.iter().zip(&amps).map(|(c, a)| c[k] * a).sum::<Complex64>())
                .collect();
            let jtj = DMatrix::from_fn(n_par, n_par, |r, c| dot(&jac[r], &jac[c]));
            let jtr = DVector::from_fn(n_par, |r, _| dot(&jac[r], &residual));

            let mut accepted = false;
            while lambda < 1e16 {
                let mut damped = jtj.clone();
                for d in 0..n_par {
                    damped[(d, d)] += lambda * jtj[(d, d)].max(1e-300);
                }
                let Some(step) = solve_spd(damped, jtr.clone()) else {
                    lambda *= 10.0;
                    continue;
                };
                let trial_amps: Vec<f64> = (0..m).map(|i| amps[i] + step[i]).collect();
                let trial_offsets: Vec<f64> = (0..m)
                    .map(|i| {
                        let (lo, hi) = self.basis.templates[i].shift_window;
                        (offsets[i] + step[m + i]).clamp(lo, hi)
                    })
                    .collect();
                let trial_dmults: Vec<f64> = if fit_damping {
                    let (lo, hi) = self.basis.damping_window;
                    (0..m).map(|i| (dmults[i] + step[2 * m + i]).clamp(lo, hi)).collect()
                } else {
                    dmults.clone()
                };
                let trial_columns = self.columns(&trial_offsets, &trial_dmults);
                let trial_ssq = residual_ssq(&trial_columns, &trial_amps, self.fid);
                if trial_ssq < ssq {
                    let rel = (ssq - trial_ssq) / ssq;
                    amps = trial_amps;
                    offsets = trial_offsets;
                    dmults = trial_dmults;
                    columns = trial_columns;
                    ssq = trial_ssq;
                    lambda = (lambda / 10.0).max(1e-12);
                    accepted = true;
                    if rel < self.config.tolerance {
                        return (amps, offsets, dmults, iter, true);
                    }
                    break;
                }
                lambda *= 10.0;
            }
            if !accepted {
                // No descent direction left: a stationary point.
                return (amps, offsets, dmults, iter, true);
            }
        }
        (amps, offsets, dmults, self.config.max_iterations, false)
    }
}

fn fit_with_start(
    fid: &[Complex64],
    basis: &Basis,
    config: &QuantConfig,
    timestamp: f64,
    start: Option<&NonlinearStart>,
) -> Result<(FrameQuant, NonlinearStart), QuantError> {
    if fid.len() != basis.n_samples {
        return Err(QuantError::SamplingMismatch {
            expected: basis.n_samples,
            got: fid.len(),
        });
    }
    let m = basis.templates.len();
    let mut quant = FrameQuant {
        amplitudes: PerMetabolite::splat(0.0),
        raw_amplitudes: PerMetabolite::splat(0.0),
        shifts_ppm: PerMetabolite::splat(0.0),
        damping_multipliers: PerMetabolite::splat(1.0),
        residual_norm: 0.0,
        timestamp,
        converged: true,
        iterations: 0,
    };
    for t in &basis.templates {
        quant.shifts_ppm[t.name] = t.shift_ppm;
    }
    let fid_energy = norm_sqr(fid);
    if fid_energy == 0.0 {
        let start = NonlinearStart {
            offsets_ppm: vec![0.0; m],
            damping_mults: vec![1.0; m],
        };
        return Ok((quant, start));
    }

    let fitter = Fitter { basis, config, fid };
    let initial = match start {
        Some(s) if s.offsets_ppm.len() == m && s.damping_mults.len() == m => NonlinearStart {
            offsets_ppm: s
                .offsets_ppm
                .iter()
                .zip(&basis.templates)
                .map(|(o, t)| o.clamp(t.shift_window.0, t.shift_window.1))
                .collect(),
            damping_mults: s.damping_mults.clone(),
        },
        _ => fitter.grid_start(),
    };
    let (raw, offsets, dmults, iterations, converged) = fitter.refine(initial);

    // Non-negativity: drop negative amplitudes and re-solve the rest.
    let columns = fitter.columns(&offsets, &dmults);
    let mut active: Vec<bool> = raw.iter().map(|&a| a >= 0.0).collect();
    let mut amps = raw.clone();
    if active.iter().any(|a| !a) {
        loop {
            amps = linear_amplitudes(&columns, fid, &active);
            let mut changed = false;
            for i in 0..m {
                if active[i] && amps[i] < 0.0 {
                    active[i] = false;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        for i in 0..m {
            if !active[i] {
                amps[i] = 0.0;
            }
        }
    }

    for (i, t) in basis.templates.iter().enumerate() {
        quant.amplitudes[t.name] = amps[i];
        quant.raw_amplitudes[t.name] = raw[i];
        quant.shifts_ppm[t.name] = t.shift_ppm + offsets[i];
        quant.damping_multipliers[t.name] = dmults[i];
    }
    quant.residual_norm = (residual_ssq(&columns, &amps, fid) / fid_energy).sqrt();
    quant.iterations = iterations;
    quant.converged = converged;
    let next = NonlinearStart {
        offsets_ppm: offsets,
        damping_mults: dmults,
    };
    if !converged {
        return Err(QuantError::FitFailure {
            iterations,
            best: Box::new(quant),
        });
    }
    Ok((quant, next))
}

/// Fits one FID. Non-convergence returns [`QuantError::FitFailure`] carrying
/// the best parameters found.
pub fn fit_frame(
    fid: &[Complex64],
    basis: &Basis,
    config: &QuantConfig,
    timestamp: f64,
) -> Result<FrameQuant, QuantError> {
    fit_with_start(fid, basis, config, timestamp, None).map(|(q, _)| q)
}

/// Fits a series of frames in order, warm-starting each from the previous
/// frame's nonlinear parameters. Frames whose fit fails are kept with
/// `converged = false`.
pub fn quantify_series(
    frames: &[Vec<Complex64>],
    timestamps: &[f64],
    basis: &Basis,
    config: &QuantConfig,
) -> Result<Vec<FrameQuant>, QuantError> {
    if frames.is_empty() {
        return Err(QuantError::Empty);
    }
    if timestamps.len() != frames.len() {
        return Err(QuantError::InvalidBasis(format!(
            "{} timestamps for {} frames",
            timestamps.len(),
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(frames.len());
    let mut start: Option<NonlinearStart> = None;
    for (fid, &ts) in frames.iter().zip(timestamps) {
        match fit_with_start(fid, basis, config, ts, start.as_ref()) {
            Ok((q, next)) => {
                out.push(q);
                start = Some(next);
            }
            Err(QuantError::FitFailure { best, .. }) => {
                out.push(*best);
                start = None;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// Averages frames sample-wise; used for the resting blocks before fitting.
pub fn average_frames(frames: &[Vec<Complex64>]) -> Option<Vec<Complex64>> {
    let first = frames.first()?;
    let n = frames.len() as f64;
    let mut acc = vec![Complex64::new(0.0, 0.0); first.len()];
    for f in frames {
        if f.len() != acc.len() {
            return None;
        }
        for (a, z) in acc.iter_mut().zip(f) {
            *a += z;
        }
    }
    Some(acc.into_iter().map(|z| z / n).collect())
}
