use ellsig_core::cost::ellipsoid_cloud;
use ellsig_core::fit::{center_to_affine, fit_ellipsoid_specific, fit_quadric_lsq, is_ellipsoid, quadric_to_center};
use ellsig_core::linalg::{log_softmax, logsumexp};
use ellsig_core::logits::center;
use ellsig_core::mac::{self, keygen, sign_at, ReplayStore};
use ellsig_core::recovery::recover_rms;
use ellsig_core::synth::{sample_outputs, synth_model, NormKind};
use ellsig_core::verify::{self, EllipseKey};
use faer::Mat;
use proptest::prelude::*;

fn scaled(points: &Mat<f64>, c: f64, shift: &[f64]) -> Mat<f64> {
    Mat::from_fn(points.nrows(), points.ncols(), |i, j| c * points[(i, j)] + shift[j])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn log_softmax_ignores_constant_shift(z in prop::collection::vec(-20.0..20.0f64, 2..40), c in -50.0..50.0f64) {
        let a = log_softmax(&z);
        let shifted: Vec<f64> = z.iter().map(|x| x + c).collect();
        let b = log_softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-10);
        }
        prop_assert!(logsumexp(&a).abs() < 1e-12);
    }

    #[test]
    fn centering_removes_shift(x in prop::collection::vec(-10.0..10.0f64, 1..50), c in -100.0..100.0f64) {
        let a = center(&x);
        let b = center(&x.iter().map(|v| v + c).collect::<Vec<_>>());
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-9);
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }

    #[test]
    fn fit_is_covariant_under_similarity(d in 2usize..6, seed in 0u64..1000, c in 0.2..5.0f64, s in -3.0..3.0f64) {
        let n = d * (d + 3) + 4;
        let pts = ellipsoid_cloud(d, n, seed);
        let shift: Vec<f64> = (0..d).map(|k| s * (k as f64 + 1.0)).collect();
        let moved = scaled(&pts, c, &shift);
        let fit = fit_quadric_lsq(moved.as_ref()).unwrap();
        prop_assert!(is_ellipsoid(&fit.form));
        prop_assert!(fit.residual_rms < 1e-7);
        let fresh = scaled(&ellipsoid_cloud(d, 5, seed), c, &shift);
        for i in 0..fresh.nrows() {
            let x: Vec<f64> = (0..d).map(|j| fresh[(i, j)]).collect();
            prop_assert!(fit.form.residual(&x).abs() < 1e-6);
        }
    }

    #[test]
    fn specific_fit_round_trips_through_affine_form(d in 2usize..5, seed in 0u64..1000) {
        let pts = ellipsoid_cloud(d, 3 * d * (d + 3), seed);
        let fit = fit_ellipsoid_specific(pts.as_ref(), None).unwrap();
        let affine = center_to_affine(&quadric_to_center(&fit.form).unwrap()).unwrap();
        for i in 0..pts.nrows() {
            let x: Vec<f64> = (0..d).map(|j| pts[(i, j)]).collect();
            let z = affine.to_unit(&x);
            let r: f64 = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((r - 1.0).abs() < 1e-6);
            let back = affine.from_unit(&z);
            for (a, b) in back.iter().zip(&x) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_outputs_lie_on_own_ellipse(seed in 0u64..10_000, d in 3usize..9) {
        let params = synth_model(64, d, NormKind::ScaledRms, 0.0, seed).unwrap();
        let key = EllipseKey::exact("m", params.clone()).unwrap();
        let m = sample_outputs(&params, 12, seed ^ 0x55).unwrap();
        for j in 0..m.n() {
            prop_assert!(verify::verify(&m.column(j), &key).unwrap().passed);
        }
    }

    #[test]
    fn recovered_key_accepts_fresh_outputs(seed in 0u64..10_000) {
        let d = 5;
        let params = synth_model(80, d, NormKind::ScaledRms, 0.0, seed).unwrap();
        let train = sample_outputs(&params, 3 * d * (d + 3), seed + 1).unwrap();
        let rec = recover_rms(&train).unwrap();
        let key = EllipseKey::recovered("r", rec, verify::DEFAULT_TAU).unwrap();
        let test = sample_outputs(&params, 10, seed + 2).unwrap();
        for j in 0..test.n() {
            prop_assert!(verify::verify(&test.column(j), &key).unwrap().passed);
        }
    }

    #[test]
    fn signing_is_deterministic(msg in prop::collection::vec(any::<u8>(), 0..64), idx in any::<u64>()) {
        let key = keygen(64, 6, 11).unwrap();
        let a = sign_at(&key, &msg, idx).unwrap();
        let b = sign_at(&key, &msg, idx).unwrap();
        prop_assert_eq!(&a.logprob, &b.logprob);
        prop_assert_eq!(mac::canonical_digest(&a.logprob), mac::canonical_digest(&b.logprob));
        let store = ReplayStore::in_memory();
        let first = mac::verify(&key, &a, &store, true).unwrap();
        prop_assert!(first.report.passed && !first.replayed);
        prop_assert!(mac::verify(&key, &b, &store, true).unwrap().replayed);
    }
}
