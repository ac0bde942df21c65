//! Dynamic phosphorus-31 MRS analysis of skeletal muscle energetics:
//! spectral quantification, T1 saturation correction, metabolic panels,
//! PCr/Pi kinetics, quality-control scoring, group statistics and power.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod kinetics;
pub mod metab;
pub mod metabolite;
pub mod pipeline;
pub mod qc;
pub mod quant;
pub mod relax;
pub mod stats;
pub mod synth;

pub use metabolite::{Metabolite, PerMetabolite};
