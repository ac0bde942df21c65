use num_complex::Complex64;
use p31_core::pipeline::SubjectRecord;
use p31_core::quant::{quantify_series, Basis, QuantConfig};
use p31_core::synth::{
    default_lineshapes, lorentzian, synth_subject, AcquisitionProtocol, DataForm, GroundTruth,
};
use p31_core::Metabolite;

fn fid_subject(truth: &GroundTruth) -> (SubjectRecord, Basis) {
    let p = AcquisitionProtocol::default();
    let r = synth_subject("q", "control", truth, &p, 5, DataForm::Fids).unwrap();
    let basis = Basis::from_lineshapes(&default_lineshapes(), &p).unwrap();
    (r, basis)
}

#[test]
fn noiseless_series_recovers_truth() {
    let truth = GroundTruth {
        noise_sd: 0.0,
        ..GroundTruth::default()
    };
    let (r, basis) = fid_subject(&truth);
    let fids = r.dynamic.fids.as_ref().unwrap();
    assert_eq!(fids.len(), 130);
    let q = quantify_series(fids, &r.protocol.timestamps(), &basis, &QuantConfig::default()).unwrap();
    let expected = &r.truth.as_ref().unwrap().observed_amplitudes;
    for (k, frame) in q.iter().enumerate() {
        assert!(frame.converged, "frame {k}");
        for m in [Metabolite::PCr, Metabolite::Pi, Metabolite::BetaAtp] {
            let want = expected[m][k];
            let got = frame.amplitudes[m];
            assert!((got - want).abs() <= 1e-4 * want.abs().max(1e-3), "frame {k} {m}: {got} vs {want}");
        }
    }
}

#[test]
fn artifact_frame_has_outlying_residual() {
    let mut truth = GroundTruth::default();
    truth.noise_sd = truth.noise_for_rest_cv(0.0025, AcquisitionProtocol::default().tr_dynamic);
    let (r, basis) = fid_subject(&truth);
    let mut fids = r.dynamic.fids.clone().unwrap();
    let p = &r.protocol;
    let bad = 57;
    let size = fids[bad][0].norm();
    let shift_hz = p.ppm_to_hz(12.0);
    for (z, t) in fids[bad].iter_mut().zip(p.sample_times()) {
        *z += lorentzian(shift_hz, 40.0, 0.0, t) * size;
    }
    let q = quantify_series(&fids, &p.timestamps(), &basis, &QuantConfig::default()).unwrap();
    let mut norms: Vec<f64> = q.iter().map(|f| f.residual_norm).collect();
    let spiked = norms[bad];
    norms.sort_by(f64::total_cmp);
    let median = norms[norms.len() / 2];
    assert!(spiked >= 5.0 * median, "{spiked} vs median {median}");
}

#[test]
fn empty_and_mismatched_inputs_error() {
    let (r, basis) = fid_subject(&GroundTruth::default());
    let fids = r.dynamic.fids.unwrap();
    assert!(quantify_series(&[], &[], &basis, &QuantConfig::default()).is_err());
    assert!(quantify_series(&fids[..2], &[0.0], &basis, &QuantConfig::default()).is_err());
    let zero = vec![vec![Complex64::new(0.0, 0.0); fids[0].len()]];
    let q = quantify_series(&zero, &[0.0], &basis, &QuantConfig::default()).unwrap();
    assert_eq!(q[0].amplitudes.pcr, 0.0);
}
