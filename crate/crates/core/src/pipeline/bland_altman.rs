use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BlandAltmanError {
    #[error("need at least 2 pairs, got {0}")]
    TooFewPairs(usize),
    #[error("pair {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltmanPoint {
    pub individual: f64,
    pub fixed: f64,
    pub mean: f64,
    pub diff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlandAltman {
    pub n: usize,
    pub bias: f64,
    pub sd_diff: f64,
    pub lower_limit: f64,
    pub upper_limit: f64,
    /// Squared Pearson correlation of the pairs; absent when either side is
    /// constant.
    pub r_squared: Option<f64>,
    pub points: Vec<BlandAltmanPoint>,
}

/// Agreement between individual-T1 and fixed-T1 values of one marker.
/// Differences are `fixed - individual`.
pub fn bland_altman(pairs: &[(f64, f64)]) -> Result<BlandAltman, BlandAltmanError> {
    let n = pairs.len();
    if n < 2 {
        return Err(BlandAltmanError::TooFewPairs(n));
    }
    if let Some(k) = pairs.iter().position(|(a, b)| !a.is_finite() || !b.is_finite()) {
        return Err(BlandAltmanError::NonFinite(k));
    }
    let points: Vec<BlandAltmanPoint> = pairs
        .iter()
        .map(|&(individual, fixed)| BlandAltmanPoint {
            individual,
            fixed,
            mean: 0.5 * (individual + fixed),
            diff: fixed - individual,
        })
        .collect();
    let nf = n as f64;
    let bias = points.iter().map(|p| p.diff).sum::<f64>() / nf;
    let sd_diff = (points.iter().map(|p| (p.diff - bias).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();

    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    let r_squared = (sxx > 0.0 && syy > 0.0).then(|| sxy * sxy / (sxx * syy));

    Ok(BlandAltman {
        n,
        bias,
        sd_diff,
        lower_limit: bias - 1.96 * sd_diff,
        upper_limit: bias + 1.96 * sd_diff,
        r_squared,
        points,
    })
}
