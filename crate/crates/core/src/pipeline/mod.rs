//! Subject files, per-subject analysis, cohort reports and agreement plots.

pub mod analyze;
pub mod bland_altman;
pub mod cohort;
pub mod config;
pub mod markers;
pub mod schema;

pub use analyze::{
    analyze_cohort, analyze_subject, reselect_recovery_start, AnalysisError, ModeAnalysis, SubjectAnalysis,
};
pub use bland_altman::{bland_altman, BlandAltman, BlandAltmanError};
pub use cohort::{cohort_report, compare_cohorts, report_csv, report_json, CohortComparison, CohortReport};
pub use config::{AnalysisConfig, ConfigError};
pub use markers::{MarkerPhase, MARKERS};
pub use schema::{load_cohort_dir, load_subject, parse_subject, save_subject, SchemaError, SubjectRecord};
