use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metab::MetabolicConstants;
use crate::metabolite::PerMetabolite;
use crate::qc::QcRubric;
use crate::quant::QuantConfig;
use crate::relax::{default_fixed_t1, T1Mode};
use crate::synth::{default_lineshapes, Lineshape};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid configuration at {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// Everything an analysis run depends on. Serialized as the JSON
/// configuration file; missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub t1_mode: T1Mode,
    pub constants: MetabolicConstants,
    pub rubric: QcRubric,
    pub fixed_t1: PerMetabolite<f64>,
    pub quant: QuantConfig,
    /// Lineshapes the quantification basis is built from.
    pub lineshapes: PerMetabolite<Lineshape>,
    /// Significance level for the normality screen and group tests.
    pub alpha: f64,
    /// Frames averaged at the end of recovery for the recovery pH.
    pub recovery_tail_frames: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            t1_mode: T1Mode::Individual,
            constants: MetabolicConstants::default(),
            rubric: QcRubric::default(),
            fixed_t1: default_fixed_t1(),
            quant: QuantConfig::default(),
            lineshapes: default_lineshapes(),
            alpha: 0.05,
            recovery_tail_frames: 5,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.constants
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.rubric
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (m, &t1) in self.fixed_t1.iter() {
            if !(t1 > 0.0 && t1.is_finite()) {
                return Err(ConfigError::Invalid(format!("fixed T1 for {m} must be > 0")));
            }
        }
        if !(0.0 < self.alpha && self.alpha < 1.0) {
            return Err(ConfigError::Invalid("alpha must lie in (0, 1)".into()));
        }
        if self.recovery_tail_frames == 0 {
            return Err(ConfigError::Invalid("recovery_tail_frames must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: AnalysisConfig = serde_path_to_error::deserialize(de).map_err(|e| ConfigError::Parse {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}
