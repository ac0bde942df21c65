//! The marker registry: every per-subject value that enters a cohort report.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::analyze::KineticFits;
use crate::kinetics::OxidativeMarkers;
use crate::metab::MetabolicPanel;

/// Marker values keyed by registry name.
pub type MarkerValues = BTreeMap<String, f64>;

/// Protocol phase a marker belongs to. Decides which QC exclusion removes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerPhase {
    Rest,
    Exercise,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MarkerSpec {
    pub name: &'static str,
    pub phase: MarkerPhase,
    pub unit: &'static str,
}

const fn spec(name: &'static str, phase: MarkerPhase, unit: &'static str) -> MarkerSpec {
    MarkerSpec { name, phase, unit }
}

use MarkerPhase::{Exercise, Recovery, Rest};

/// All reported markers, in report order.
pub const MARKERS: &[MarkerSpec] = &[
    spec("pcr_rest", Rest, "mM"),
    spec("pi_rest", Rest, "mM"),
    spec("atp_rest", Rest, "mM"),
    spec("adp_rest", Rest, "uM"),
    spec("h2po4_rest", Rest, "mM"),
    spec("ph_rest", Rest, ""),
    spec("pcr_pi_rest", Rest, ""),
    spec("pcr_depletion_pct", Exercise, "%"),
    spec("pcr_end_ex", Exercise, "mM"),
    spec("pi_end_ex", Exercise, "mM"),
    spec("ph_end_ex", Exercise, ""),
    spec("ph_min", Exercise, ""),
    spec("adp_end_ex", Exercise, "uM"),
    spec("h2po4_end_ex", Exercise, "mM"),
    spec("tau_pcr_ex", Exercise, "s"),
    spec("tau_pi_ex", Exercise, "s"),
    spec("r2_pcr_ex", Exercise, ""),
    spec("r2_pi_ex", Exercise, ""),
    spec("vi_pcr", Exercise, "mM/s"),
    spec("vmax", Exercise, "mM/s"),
    spec("tau_pcr_rec", Recovery, "s"),
    spec("tau_pi_rec", Recovery, "s"),
    spec("r2_pcr_rec", Recovery, ""),
    spec("r2_pi_rec", Recovery, ""),
    spec("cv_tau_pcr_rec", Recovery, "%"),
    spec("cv_tau_pi_rec", Recovery, "%"),
    spec("pcr_rec", Recovery, "mM"),
    spec("pi_rec", Recovery, "mM"),
    spec("atp_rec", Recovery, "mM"),
    spec("adp_rec", Recovery, "uM"),
    spec("ph_rec", Recovery, ""),
    spec("pcr_repletion_pct", Recovery, "%"),
];

pub fn marker_spec(name: &str) -> Option<&'static MarkerSpec> {
    MARKERS.iter().find(|m| m.name == name)
}

pub struct MarkerInputs<'a> {
    pub rest: &'a MetabolicPanel,
    pub post_exercise: Option<&'a MetabolicPanel>,
    pub post_recovery: Option<&'a MetabolicPanel>,
    pub fits: &'a KineticFits,
    pub oxidative: Option<&'a OxidativeMarkers>,
    pub depletion_pct: Option<f64>,
    pub ph_min: Option<f64>,
}

/// Collects every finite marker value available from one mode's results.
pub fn marker_value_map(inputs: &MarkerInputs) -> MarkerValues {
    let mut out = MarkerValues::new();
    let mut put = |name: &str, value: Option<f64>| {
        if let Some(v) = value.filter(|v| v.is_finite()) {
            debug_assert!(marker_spec(name).is_some(), "unregistered marker {name}");
            out.insert(name.to_string(), v);
        }
    };
    let r = inputs.rest;
    put("pcr_rest", Some(r.pcr_mm));
    put("pi_rest", Some(r.pi_mm));
    put("atp_rest", Some(r.atp_mm));
    put("adp_rest", Some(r.adp_um));
    put("h2po4_rest", Some(r.h2po4_mm));
    put("ph_rest", Some(r.ph));
    put("pcr_pi_rest", Some(r.pcr_pi_ratio));

    put("pcr_depletion_pct", inputs.depletion_pct);
    if let Some(p) = inputs.post_exercise {
        put("pcr_end_ex", Some(p.pcr_mm));
        put("pi_end_ex", Some(p.pi_mm));
        put("ph_end_ex", Some(p.ph));
        put("adp_end_ex", Some(p.adp_um));
        put("h2po4_end_ex", Some(p.h2po4_mm));
    }
    put("ph_min", inputs.ph_min);
    let f = inputs.fits;
    put("tau_pcr_ex", f.pcr_ex.as_ref().map(|x| x.tau));
    put("tau_pi_ex", f.pi_ex.as_ref().map(|x| x.tau));
    put("r2_pcr_ex", f.pcr_ex.as_ref().map(|x| x.r2));
    put("r2_pi_ex", f.pi_ex.as_ref().map(|x| x.r2));
    if let Some(o) = inputs.oxidative {
        put("vi_pcr", Some(o.vi_pcr));
        put("vmax", Some(o.vmax));
    }

    put("tau_pcr_rec", f.pcr_rec.as_ref().map(|x| x.tau));
    put("tau_pi_rec", f.pi_rec.as_ref().map(|x| x.tau));
    put("r2_pcr_rec", f.pcr_rec.as_ref().map(|x| x.r2));
    put("r2_pi_rec", f.pi_rec.as_ref().map(|x| x.r2));
    put("cv_tau_pcr_rec", f.pcr_rec.as_ref().map(|x| x.cv_tau_pct));
    put("cv_tau_pi_rec", f.pi_rec.as_ref().map(|x| x.cv_tau_pct));
    if let Some(p) = inputs.post_recovery {
        put("pcr_rec", Some(p.pcr_mm));
        put("pi_rec", Some(p.pi_mm));
        put("atp_rec", Some(p.atp_mm));
        put("adp_rec", Some(p.adp_um));
        put("ph_rec", Some(p.ph));
        // Share of the exercise PCr drop restored by the recovery asymptote.
        if let Some(post) = inputs.post_exercise {
            let drop = r.pcr_mm - post.pcr_mm;
            if drop > 0.0 {
                put("pcr_repletion_pct", Some(100.0 * (p.pcr_mm - post.pcr_mm) / drop));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn registry_names_are_unique() {
        let names: BTreeSet<_> = MARKERS.iter().map(|m| m.name).collect();
        assert_eq!(names.len(), MARKERS.len());
    }
}
