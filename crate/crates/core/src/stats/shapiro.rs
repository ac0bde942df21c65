use statrs::distribution::{ContinuousCDF, Normal};

use super::StatsError;

fn poly(c: &[f64], x: f64) -> f64 {
    // c[0] + c[1] x + c[2] x^2 + ...
    c.iter().rev().fold(0.0, |acc, &ci| acc * x + ci)
}

const C1: [f64; 6] = [0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056];
const C2: [f64; 6] = [0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633];
const C3: [f64; 4] = [0.5440, -0.39978, 0.025054, -6.714e-4];
const C4: [f64; 4] = [1.3822, -0.77857, 0.062767, -0.0020322];
const C5: [f64; 4] = [-1.5861, -0.31082, -0.083751, 0.0038915];
const C6: [f64; 3] = [-0.4803, -0.082676, 0.0030302];
const G: [f64; 2] = [-2.273, 0.459];

/// Shapiro-Wilk coefficients for the sorted sample, Royston's approximation.
fn coefficients(n: usize, std_normal: &Normal) -> Vec<f64> {
    if n == 3 {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        return vec![-h, 0.0, h];
    }
    let an = n as f64;
    let m: Vec<f64> = (1..=n)
        .map(|i| std_normal.inverse_cdf((i as f64 - 0.375) / (an + 0.25)))
        .collect();
    let mm: f64 = m.iter().map(|v| v * v).sum();
    let u = 1.0 / an.sqrt();
    let an_ = m[n - 1] / mm.sqrt() + poly(&C1, u);
    let mut a = vec![0.0; n];
    if n > 5 {
        let an1 = m[n - 2] / mm.sqrt() + poly(&C2, u);
        let phi = (mm - 2.0 * m[n - 1].powi(2) - 2.0 * m[n - 2].powi(2))
            / (1.0 - 2.0 * an_.powi(2) - 2.0 * an1.powi(2));
        for i in 2..n - 2 {
            a[i] = m[i] / phi.sqrt();
        }
        a[n - 1] = an_;
        a[n - 2] = an1;
        a[0] = -an_;
        a[1] = -an1;
    } else {
        let phi = (mm - 2.0 * m[n - 1].powi(2)) / (1.0 - 2.0 * an_.powi(2));
        for i in 1..n - 1 {
            a[i] = m[i] / phi.sqrt();
        }
        a[n - 1] = an_;
        a[0] = -an_;
    }
    a
}

/// Shapiro-Wilk W and p-value (Royston 1995, AS R94).
pub fn shapiro_wilk(sample: &[f64]) -> Result<(f64, f64), StatsError> {
    let n = sample.len();
    if !(3..=5000).contains(&n) {
        return Err(StatsError::UnsupportedSize(n));
    }
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let mut x = sample.to_vec();
    x.sort_by(f64::total_cmp);
    let range = x[n - 1] - x[0];
    if !(range > 1e-19 * x[n - 1].abs().max(1.0)) {
        return Err(StatsError::Degenerate("constant sample".into()));
    }
    let std_normal = Normal::standard();
    let a = coefficients(n, &std_normal);
    let mean = x.iter().sum::<f64>() / n as f64;
    let ss: f64 = x.iter().map(|v| (v - mean).powi(2)).sum();
    let num: f64 = a.iter().zip(&x).map(|(ai, xi)| ai * (xi - mean)).sum();
    let w = (num * num / ss).min(1.0);

    if n == 3 {
        let pi6 = 6.0 / std::f64::consts::PI;
        let w = w.max(0.75);
        let p = (pi6 * (w.sqrt().asin() - 0.75f64.sqrt().asin())).clamp(0.0, 1.0);
        return Ok((w, p));
    }

    let w1 = 1.0 - w;
    if w1 <= 0.0 {
        return Ok((w, 1.0));
    }
    let y = w1.ln();
    let an = n as f64;
    let p = if n <= 11 {
        let gamma = poly(&G, an);
        if y >= gamma {
            return Ok((w, 0.0));
        }
        let y = -(gamma - y).ln();
        let m = poly(&C3, an);
        let s = poly(&C4, an).exp();
        1.0 - std_normal.cdf((y - m) / s)
    } else {
        let ln_n = an.ln();
        let m = poly(&C5, ln_n);
        let s = poly(&C6, ln_n).exp();
        1.0 - std_normal.cdf((y - m) / s)
    };
    Ok((w, p.clamp(0.0, 1.0)))
}
