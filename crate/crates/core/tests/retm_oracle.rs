//! Exactness of ReTM estimation and cancellation on noiseless
//! multiplicative mixtures with known transfer matrices.

use num_complex::Complex64;
use retm_core::numerics::{ComplexMatrix, Svd, DEFAULT_RCOND};
use retm_core::retm::{
    apply_separation, estimate_retm, synth_multiplicative_scene, ReTMStack,
};
use retm_core::signal::Spectrogram;

fn energy(s: &Spectrogram) -> f64 {
    s.data().iter().map(|v| v.norm_sqr()).sum()
}

fn identity_error(r: &ComplexMatrix, h_a: &ComplexMatrix, h_b: &ComplexMatrix) -> f64 {
    r.matmul(h_b).sub(h_a).frobenius_norm() / h_a.frobenius_norm()
}

#[test]
fn retm_reproduces_group_a_transfer() {
    let scene = synth_multiplicative_scene(2, 3, 3, 17, 50, 11).unwrap();
    let r = estimate_retm(&scene.spec_a, &scene.spec_b, 0..50, DEFAULT_RCOND).unwrap();
    for bin in 0..17 {
        let err = identity_error(&r.matrices[bin], &scene.transfers.h_a[bin], &scene.transfers.h_b[bin]);
        assert!(err <= 1e-8, "bin {bin}: {err:e}");
        assert!(!r.diagnostics[bin].fallback);
    }
}

#[test]
fn exact_retm_cancels_undesired_sources() {
    let scene = synth_multiplicative_scene(3, 4, 5, 9, 30, 5).unwrap();
    let exact = ReTMStack {
        matrices: scene.transfers.exact_retm(DEFAULT_RCOND).unwrap(),
        target_id: 0,
        frame_count: 0,
        rcond_used: DEFAULT_RCOND,
        diagnostics: vec![],
    };
    let out = apply_separation(&scene.spec_a, &scene.spec_b, &exact, 0..30).unwrap();
    let ratio = energy(&out) / energy(&scene.spec_a);
    assert!(ratio <= 1e-14, "{ratio:e}");
}

#[test]
fn target_only_mixture_gives_distortion_term() {
    // Sources 0..2 are undesired, source 3 is the target.
    let all = synth_multiplicative_scene(4, 4, 5, 9, 30, 8).unwrap();
    let undesired = all.transfers.select_sources(&[0, 1, 2]);
    let target = all.transfers.select_sources(&[3]);
    let train = undesired.mix(&all.sources.select_sources(&[0, 1, 2]), *all.spec_a.params(), 16000).unwrap();
    let r = estimate_retm(&train.0, &train.1, 0..30, DEFAULT_RCOND).unwrap();
    let s_target = all.sources.select_sources(&[3]);
    let (ma, mb) = target.mix(&s_target, *all.spec_a.params(), 16000).unwrap();
    let out = apply_separation(&ma, &mb, &r, 0..30).unwrap();
    for bin in 0..9 {
        let distortion = target.h_a[bin].sub(&r.matrices[bin].matmul(&target.h_b[bin]));
        for t in 0..30 {
            let expected = distortion.mul_vec(s_target.get(bin, t));
            for (o, e) in out.point(bin, t).iter().zip(&expected) {
                assert!((o - e).norm() <= 1e-10 * (1.0 + e.norm()));
            }
        }
    }
}

#[test]
fn drawn_transfers_have_full_column_rank() {
    let scene = synth_multiplicative_scene(6, 10, 17, 5, 10, 3).unwrap();
    for hb in &scene.transfers.h_b {
        let s = Svd::new(hb).unwrap();
        assert!(s.min_singular_value() / s.max_singular_value() > 1e-6);
    }
    let a = &scene.transfers.h_a[2];
    let (ma, _) = scene.transfers.mix(&scene.sources, *scene.spec_a.params(), 16000).unwrap();
    let expected = a.mul_vec(scene.sources.get(2, 4));
    for (x, y) in ma.point(2, 4).iter().zip(&expected) {
        assert!((x - y).norm() <= 1e-14 * (1.0 + y.norm()));
    }
}

#[test]
fn training_scale_does_not_change_estimate() {
    let scene = synth_multiplicative_scene(2, 3, 4, 9, 40, 21).unwrap();
    let mut scaled = scene.sources.clone();
    scaled.scale(Complex64::new(-3.5, 2.0));
    let (a2, b2) = scene.transfers.mix(&scaled, *scene.spec_a.params(), 16000).unwrap();
    let r1 = estimate_retm(&scene.spec_a, &scene.spec_b, 0..40, DEFAULT_RCOND).unwrap();
    let r2 = estimate_retm(&a2, &b2, 0..40, DEFAULT_RCOND).unwrap();
    for (x, y) in r1.matrices.iter().zip(&r2.matrices) {
        assert!(x.sub(y).frobenius_norm() <= 1e-10 * x.frobenius_norm());
    }
}
