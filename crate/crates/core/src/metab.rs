//! Conversion of corrected amplitudes into the metabolic panel: concentrations,
//! intracellular pH, creatine-kinase [ADP], diprotonated phosphate and ratios.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metabolite::PerMetabolite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetabError {
    #[error("reference error: beta-ATP reference amplitude must be > 0, got {0}")]
    Reference(f64),
    #[error("Pi shift {shift} ppm outside the titration range ({acid}, {base}) ppm")]
    ShiftOutOfRange { shift: f64, acid: f64, base: f64 },
    #[error("invalid metabolic constants: {0}")]
    InvalidConstants(String),
    #[error("domain error: {0}")]
    Domain(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetabolicConstants {
    /// Assumed [ATP] used as the concentration reference (mM).
    pub atp_reference_mm: f64,
    pub pka: f64,
    /// Pi shift of the fully protonated form, ppm from PCr.
    pub delta_acid: f64,
    /// Pi shift of the fully deprotonated form, ppm from PCr.
    pub delta_base: f64,
    /// Creatine kinase equilibrium constant (M^-1).
    pub k_ck: f64,
    /// Total creatine over resting [PCr].
    pub tcr_over_pcr_rest: f64,
    /// ADP half-saturation constant for oxidative ATP synthesis (uM).
    pub km_adp: f64,
}

impl Default for MetabolicConstants {
    fn default() -> Self {
        MetabolicConstants {
            atp_reference_mm: 8.2,
            pka: 6.75,
            delta_acid: 3.27,
            delta_base: 5.69,
            k_ck: 1.66e9,
            tcr_over_pcr_rest: 1.25,
            km_adp: 30.0,
        }
    }
}

impl MetabolicConstants {
    pub fn validate(&self) -> Result<(), MetabError> {
        let fields = [
            ("atp_reference_mm", self.atp_reference_mm),
            ("pka", self.pka),
            ("delta_acid", self.delta_acid),
            ("delta_base", self.delta_base),
            ("k_ck", self.k_ck),
            ("tcr_over_pcr_rest", self.tcr_over_pcr_rest),
            ("km_adp", self.km_adp),
        ];
        for (name, value) in fields {
            if !(value > 0.0 && value.is_finite()) {
                return Err(MetabError::InvalidConstants(format!(
                    "{name} must be positive, got {value}"
                )));
            }
        }
        if self.delta_base <= self.delta_acid {
            return Err(MetabError::InvalidConstants(
                "delta_base must exceed delta_acid".into(),
            ));
        }
        if self.tcr_over_pcr_rest <= 1.0 {
            return Err(MetabError::InvalidConstants(
                "tcr_over_pcr_rest must exceed 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PanelPhase {
    Rest,
    PostExercise,
    PostRecovery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetabolicPanel {
    pub phase: PanelPhase,
    pub pcr_mm: f64,
    pub pi_mm: f64,
    pub atp_mm: f64,
    pub adp_um: f64,
    pub h2po4_mm: f64,
    pub ph: f64,
    pub pcr_pi_ratio: f64,
    /// Set when free creatine was floored at zero and [ADP] is therefore 0.
    pub adp_degenerate: bool,
}

impl MetabolicPanel {
    /// Assembles a panel, deriving [ADP], [H2PO4-] and PCr/Pi from the inputs.
    pub fn build(
        phase: PanelPhase,
        pcr_mm: f64,
        pi_mm: f64,
        atp_mm: f64,
        ph: f64,
        total_creatine_mm: f64,
        constants: &MetabolicConstants,
    ) -> Result<Self, MetabError> {
        let adp = adp(pcr_mm, atp_mm, ph, total_creatine_mm, constants)?;
        Ok(MetabolicPanel {
            phase,
            pcr_mm,
            pi_mm,
            atp_mm,
            adp_um: adp.adp_um,
            h2po4_mm: h2po4(pi_mm.max(0.0), ph, constants)?,
            ph,
            pcr_pi_ratio: if pi_mm > 0.0 { pcr_mm / pi_mm } else { f64::NAN },
            adp_degenerate: adp.degenerate,
        })
    }
}

/// Amplitude-to-millimolar factor, fixed once from the resting beta-ATP reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationScale {
    pub mm_per_unit: f64,
}

impl ConcentrationScale {
    pub fn from_reference(
        batp_rest_corrected: f64,
        constants: &MetabolicConstants,
    ) -> Result<Self, MetabError> {
        if !(batp_rest_corrected > 0.0) {
            return Err(MetabError::Reference(batp_rest_corrected));
        }
        Ok(ConcentrationScale {
            mm_per_unit: constants.atp_reference_mm / batp_rest_corrected,
        })
    }

    pub fn apply(&self, corrected: f64) -> f64 {
        corrected * self.mm_per_unit
    }

    pub fn apply_all(&self, corrected: &PerMetabolite<f64>) -> PerMetabolite<f64> {
        corrected.map(|_, &a| self.apply(a))
    }
}

/// Converts resting corrected amplitudes to mM using their own beta-ATP as reference.
pub fn concentrations(
    corrected_amps: &PerMetabolite<f64>,
    constants: &MetabolicConstants,
) -> Result<PerMetabolite<f64>, MetabError> {
    let scale = ConcentrationScale::from_reference(corrected_amps.batp, constants)?;
    Ok(scale.apply_all(corrected_amps))
}

/// Henderson-Hasselbalch pH from the Pi chemical shift relative to PCr.
pub fn ph_from_shift(delta_pi: f64, constants: &MetabolicConstants) -> Result<f64, MetabError> {
    let (acid, base) = (constants.delta_acid, constants.delta_base);
    if !(delta_pi > acid && delta_pi < base) {
        return Err(MetabError::ShiftOutOfRange {
            shift: delta_pi,
            acid,
            base,
        });
    }
    Ok(constants.pka + ((delta_pi - acid) / (base - delta_pi)).log10())
}

/// Inverse of [`ph_from_shift`].
pub fn shift_from_ph(ph: f64, constants: &MetabolicConstants) -> f64 {
    let ratio = 10f64.powf(ph - constants.pka);
    (constants.delta_acid + constants.delta_base * ratio) / (1.0 + ratio)
}

pub fn h2po4(pi_mm: f64, ph: f64, constants: &MetabolicConstants) -> Result<f64, MetabError> {
    if !(pi_mm >= 0.0) {
        return Err(MetabError::Domain(format!("[Pi] must be >= 0, got {pi_mm}")));
    }
    Ok(pi_mm / (1.0 + 10f64.powf(ph - constants.pka)))
}

pub fn total_creatine(pcr_rest_mm: f64, constants: &MetabolicConstants) -> f64 {
    constants.tcr_over_pcr_rest * pcr_rest_mm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdpEstimate {
    pub adp_um: f64,
    pub degenerate: bool,
}

/// Free [ADP] (uM) from the creatine kinase equilibrium.
pub fn adp(
    pcr_mm: f64,
    atp_mm: f64,
    ph: f64,
    total_creatine_mm: f64,
    constants: &MetabolicConstants,
) -> Result<AdpEstimate, MetabError> {
    if !(pcr_mm > 0.0) {
        return Err(MetabError::Domain(format!("[PCr] must be > 0, got {pcr_mm}")));
    }
    let free_creatine = total_creatine_mm - pcr_mm;
    if free_creatine <= 0.0 {
        return Ok(AdpEstimate {
            adp_um: 0.0,
            degenerate: true,
        });
    }
    let hydrogen = 10f64.powf(-ph);
    let molar = (atp_mm * 1e-3 * free_creatine * 1e-3) / (pcr_mm * 1e-3 * hydrogen * constants.k_ck);
    Ok(AdpEstimate {
        adp_um: molar * 1e6,
        degenerate: false,
    })
}

pub fn depletion_pct(pcr_rest_mm: f64, pcr_post_mm: f64) -> Result<f64, MetabError> {
    if !(pcr_rest_mm > 0.0) {
        return Err(MetabError::Domain(format!(
            "resting [PCr] must be > 0, got {pcr_rest_mm}"
        )));
    }
    Ok(100.0 * (pcr_rest_mm - pcr_post_mm) / pcr_rest_mm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn k() -> MetabolicConstants {
        MetabolicConstants::default()
    }

    #[test]
    fn defaults_validate() {
        k().validate().unwrap();
        let bad = MetabolicConstants {
            delta_base: 3.0,
            ..k()
        };
        assert!(bad.validate().is_err());
        let bad = MetabolicConstants {
            tcr_over_pcr_rest: 0.9,
            ..k()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn concentrations_reference_to_beta_atp() {
        let same = PerMetabolite::splat(3.7);
        let c = concentrations(&same, &k()).unwrap();
        for (_, &v) in c.iter() {
            assert_abs_diff_eq!(v, 8.2, epsilon = 1e-12);
        }
        let mut amps = PerMetabolite::splat(1.0);
        amps.pcr = 4.1;
        assert_abs_diff_eq!(concentrations(&amps, &k()).unwrap().pcr, 33.62, epsilon = 1e-9);
        amps.batp = 0.0;
        assert_eq!(concentrations(&amps, &k()), Err(MetabError::Reference(0.0)));
    }

    #[test]
    fn ph_examples() {
        assert_abs_diff_eq!(ph_from_shift(4.48, &k()).unwrap(), 6.75, epsilon = 1e-12);
        assert_abs_diff_eq!(ph_from_shift(4.906, &k()).unwrap(), 7.07, epsilon = 0.005);
        assert!(ph_from_shift(5.69, &k()).is_err());
        assert!(ph_from_shift(3.27, &k()).is_err());
        assert!(ph_from_shift(5.69 - 1e-9, &k()).is_ok());
    }

    #[test]
    fn h2po4_examples() {
        assert_abs_diff_eq!(h2po4(5.47, 7.10, &k()).unwrap(), 1.70, epsilon = 0.02);
        assert_abs_diff_eq!(h2po4(5.54, 7.07, &k()).unwrap(), 1.79, epsilon = 0.02);
        assert_abs_diff_eq!(h2po4(4.0, 6.75, &k()).unwrap(), 2.0, epsilon = 1e-12);
        assert!(h2po4(-1.0, 7.0, &k()).is_err());
    }

    #[test]
    fn adp_examples() {
        // TCr = 42.5 mM supplied through the ratio with [PCr]_rest = 34.
        let constants = MetabolicConstants {
            tcr_over_pcr_rest: 42.5 / 34.0,
            ..k()
        };
        let tcr = total_creatine(34.0, &constants);
        let est = adp(33.0, 8.2, 7.05, tcr, &constants).unwrap();
        // 1e6 * (8.2e-3 * 9.5e-3) / (33e-3 * 10^-7.05 * 1.66e9)
        assert_abs_diff_eq!(est.adp_um, 15.96, epsilon = 0.05);
        assert!(!est.degenerate);

        let zero = adp(tcr, 8.2, 7.05, tcr, &constants).unwrap();
        assert_eq!(zero.adp_um, 0.0);
        assert!(zero.degenerate);

        let acid = adp(33.0, 8.2, 7.05 - 2f64.log10(), tcr, &constants).unwrap();
        assert_abs_diff_eq!(acid.adp_um, est.adp_um / 2.0, epsilon = 1e-9);
        assert!(adp(0.0, 8.2, 7.0, tcr, &constants).is_err());
    }

    #[test]
    fn depletion_examples() {
        assert_abs_diff_eq!(depletion_pct(33.59, 20.10).unwrap(), 40.16, epsilon = 0.005);
        assert_eq!(depletion_pct(30.0, 30.0).unwrap(), 0.0);
        assert_eq!(depletion_pct(30.0, 0.0).unwrap(), 100.0);
        assert!(depletion_pct(0.0, 1.0).is_err());
    }

    #[test]
    fn panel_ratio_matches_concentrations() {
        let p = MetabolicPanel::build(PanelPhase::Rest, 33.0, 4.4, 8.2, 7.05, 41.25, &k()).unwrap();
        assert_abs_diff_eq!(p.pcr_pi_ratio, 33.0 / 4.4, epsilon = 1e-12);
        assert!(p.h2po4_mm <= p.pi_mm);
    }

    proptest! {
        #[test]
        fn shift_and_ph_round_trip(ph in 6.3f64..7.4) {
            let shift = shift_from_ph(ph, &k());
            prop_assert!((ph_from_shift(shift, &k()).unwrap() - ph).abs() < 1e-9);
        }

        #[test]
        fn h2po4_bounded_and_decreasing(pi in 0.1f64..40.0, ph in 6.0f64..7.7, dph in 0.001f64..0.3) {
            let a = h2po4(pi, ph, &k()).unwrap();
            prop_assert!(a <= pi);
            prop_assert!(h2po4(pi, ph + dph, &k()).unwrap() < a);
        }

        #[test]
        fn concentrations_scale_invariant(c in 0.01f64..100.0, pcr in 0.1f64..10.0, pi in 0.1f64..3.0) {
            let amps = PerMetabolite { pcr, pi, gatp: 1.0, aatp: 1.1, batp: 0.9 };
            let scaled = amps.map(|_, &a| a * c);
            let a = concentrations(&amps, &k()).unwrap();
            let b = concentrations(&scaled, &k()).unwrap();
            prop_assert!((a.pcr - b.pcr).abs() < 1e-9 * a.pcr.abs().max(1.0));
            prop_assert!((a.pi - b.pi).abs() < 1e-9 * a.pi.abs().max(1.0));
        }
    }
}
