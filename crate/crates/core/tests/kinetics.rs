use p31_core::kinetics::fit_recovery;
use p31_core::Metabolite;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Recovery fits on 90 frames with additive Gaussian noise are unbiased to
/// within a few percent and their reported CV tracks the spread.
#[test]
fn recovery_tau_monte_carlo() {
    let tau = 33.11;
    let times: Vec<f64> = (0..90).map(|k| 2.0 * k as f64).collect();
    let clean: Vec<f64> = times.iter().map(|t| 30.0 - 15.0 * (-t / tau).exp()).collect();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut taus = Vec::new();
    let mut cvs = Vec::new();
    for _ in 0..500 {
        let v: Vec<f64> = clean.iter().map(|c| c + noise.sample(&mut rng)).collect();
        let fit = fit_recovery(Metabolite::PCr, &times, &v, 0).unwrap();
        taus.push(fit.tau);
        cvs.push(fit.cv_tau_pct);
    }
    let n = taus.len() as f64;
    let mean = taus.iter().sum::<f64>() / n;
    let sd = (taus.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!((mean - tau).abs() / tau < 0.02, "mean tau {mean}");
    let empirical_cv = 100.0 * sd / mean;
    let reported_cv = cvs.iter().sum::<f64>() / n;
    assert!((reported_cv / empirical_cv - 1.0).abs() < 0.25, "{reported_cv} vs {empirical_cv}");
}

#[test]
fn start_index_shifts_origin() {
    let tau = 40.0;
    let times: Vec<f64> = (0..90).map(|k| 2.0 * k as f64).collect();
    let v: Vec<f64> = times.iter().map(|t| 30.0 - 15.0 * (-t / tau).exp()).collect();
    let fit = fit_recovery(Metabolite::PCr, &times, &v, 3).unwrap();
    assert!((fit.tau - tau).abs() < 1e-6);
    assert_eq!(fit.t0, 6.0);
    assert_eq!(fit.n_points, 87);
    assert!((fit.delta - 15.0 * (-6.0 / tau).exp()).abs() < 1e-6);
}
