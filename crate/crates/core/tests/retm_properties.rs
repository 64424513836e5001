use num_complex::Complex64;
use proptest::prelude::*;
use retm_core::numerics::DEFAULT_RCOND;
use retm_core::retm::{apply_separation, estimate_retm, synth_multiplicative_scene, ReTMStack};
use retm_core::signal::Spectrogram;

fn energy(s: &Spectrogram) -> f64 {
    s.data().iter().map(|v| v.norm_sqr()).sum()
}

fn combine(x: &Spectrogram, y: &Spectrogram, a: Complex64, b: Complex64) -> Spectrogram {
    let data = x.data().iter().zip(y.data()).map(|(u, v)| u * a + v * b).collect();
    Spectrogram::from_parts(data, x.frames(), x.channels(), *x.params(), x.sample_rate_hz(), x.origin_len())
        .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimate_ignores_training_scale(
        sources in 1usize..4,
        extra_b in 0usize..3,
        q_a in 1usize..5,
        seed in any::<u64>(),
        re in 0.1f64..10.0,
        im in -5.0f64..5.0,
    ) {
        let scene = synth_multiplicative_scene(sources, q_a, sources + extra_b, 9, 30, seed).unwrap();
        let mut scaled = scene.sources.clone();
        scaled.scale(Complex64::new(re, im));
        let (a2, b2) = scene.transfers.mix(&scaled, *scene.spec_a.params(), 16000).unwrap();
        let r1 = estimate_retm(&scene.spec_a, &scene.spec_b, 0..30, DEFAULT_RCOND).unwrap();
        let r2 = estimate_retm(&a2, &b2, 0..30, DEFAULT_RCOND).unwrap();
        for (x, y) in r1.matrices.iter().zip(&r2.matrices) {
            prop_assert!(x.sub(y).frobenius_norm() <= 1e-10 * x.frobenius_norm().max(1e-300));
        }
    }

    #[test]
    fn separation_is_linear_in_the_mixture(
        seed in any::<u64>(),
        a in (-2.0f64..2.0, -2.0f64..2.0),
        b in (-2.0f64..2.0, -2.0f64..2.0),
    ) {
        let train = synth_multiplicative_scene(2, 3, 4, 9, 20, seed).unwrap();
        let other = synth_multiplicative_scene(3, 3, 4, 9, 20, seed ^ 0xabc).unwrap();
        let r = estimate_retm(&train.spec_a, &train.spec_b, 0..20, DEFAULT_RCOND).unwrap();
        let (a, b) = (Complex64::new(a.0, a.1), Complex64::new(b.0, b.1));
        let sep = |ma: &Spectrogram, mb: &Spectrogram| apply_separation(ma, mb, &r, 0..20).unwrap();
        let lhs = sep(
            &combine(&train.spec_a, &other.spec_a, a, b),
            &combine(&train.spec_b, &other.spec_b, a, b),
        );
        let rhs = combine(&sep(&train.spec_a, &train.spec_b), &sep(&other.spec_a, &other.spec_b), a, b);
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((x - y).norm() <= 1e-10 * (1.0 + y.norm()));
        }
    }

    #[test]
    fn exact_retm_annihilates_undesired_span(seed in any::<u64>(), sources in 1usize..5) {
        let scene = synth_multiplicative_scene(sources, 4, 6, 9, 25, seed).unwrap();
        let exact = ReTMStack {
            matrices: scene.transfers.exact_retm(DEFAULT_RCOND).unwrap(),
            target_id: 0,
            frame_count: 0,
            rcond_used: DEFAULT_RCOND,
            diagnostics: vec![],
        };
        let out = apply_separation(&scene.spec_a, &scene.spec_b, &exact, 0..25).unwrap();
        let db = 10.0 * (energy(&out) / energy(&scene.spec_a)).log10();
        prop_assert!(db <= -140.0, "{db} dB");
    }
}

#[test]
fn silent_training_gives_pass_through() {
    let scene = synth_multiplicative_scene(2, 3, 3, 9, 20, 4).unwrap();
    let zero_a = combine(&scene.spec_a, &scene.spec_a, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    let zero_b = combine(&scene.spec_b, &scene.spec_b, Complex64::new(0.0, 0.0), Complex64::new(0.0, 0.0));
    let r = estimate_retm(&zero_a, &zero_b, 0..20, DEFAULT_RCOND).unwrap();
    assert!(r.matrices.iter().all(|m| m.max_abs() == 0.0));
    let out = apply_separation(&scene.spec_a, &scene.spec_b, &r, 0..20).unwrap();
    assert_eq!(out.data(), scene.spec_a.data());
}

#[test]
fn too_few_training_frames_is_an_error() {
    let scene = synth_multiplicative_scene(2, 5, 3, 9, 20, 4).unwrap();
    assert!(estimate_retm(&scene.spec_a, &scene.spec_b, 0..4, DEFAULT_RCOND).is_err());
    assert!(estimate_retm(&scene.spec_a, &scene.spec_b, 0..5, DEFAULT_RCOND).is_ok());
}
