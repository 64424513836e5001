use std::collections::BTreeMap;

use proptest::prelude::*;
use retm_core::room::{
    render_scene, scale_to_snr, simulate_rir, SceneConfig, SourceConfig, SourceRole,
};
use retm_core::signal::AudioBuffer;

const ROOM: [f64; 3] = [6.0, 5.0, 3.0];

fn point() -> impl Strategy<Value = [f64; 3]> {
    (0.3f64..5.7, 0.3f64..4.7, 0.3f64..2.7).prop_map(|(x, y, z)| [x, y, z])
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn argmax_abs(x: &[f64]) -> usize {
    x.iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().total_cmp(&b.1.abs()))
        .map(|(i, _)| i)
        .unwrap()
}

fn small_scene(seed: u64, thermal: f64) -> (SceneConfig, BTreeMap<String, AudioBuffer>) {
    let scene = SceneConfig {
        room_dims: [4.0, 4.5, 3.0],
        t60_s: 0.15,
        sources: vec![
            SourceConfig { position: [1.0, 1.2, 1.5], role: SourceRole::Speech, signal_id: "a".into(), gain_db: 0.0 },
            SourceConfig { position: [3.0, 3.1, 1.4], role: SourceRole::Speech, signal_id: "b".into(), gain_db: -4.0 },
            SourceConfig { position: [2.0, 4.0, 2.0], role: SourceRole::Noise, signal_id: "n".into(), gain_db: 0.0 },
        ],
        microphones: vec![[2.0, 2.0, 1.2], [2.1, 2.0, 1.2], [2.0, 2.2, 1.3]],
        sample_rate_hz: 8000,
        background_snr_db: 5.0,
        thermal_snr_db: thermal,
        seed,
    };
    let mut signals = BTreeMap::new();
    for (k, id) in ["a", "b", "n"].iter().enumerate() {
        let x: Vec<f64> = (0..4000)
            .map(|i| ((i * (k + 3)) as f64 * 0.013).sin() + 0.3 * ((i * 7 + k) as f64 * 0.21).cos())
            .collect();
        signals.insert(id.to_string(), AudioBuffer::mono(x, 8000).unwrap());
    }
    (scene, signals)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn anechoic_peak_sits_at_the_propagation_delay(src in point(), mic in point()) {
        prop_assume!(dist(src, mic) > 0.1);
        let rir = simulate_rir(ROOM, 0.0, src, mic, 16000, 0.1).unwrap();
        let expected = 16000.0 * dist(src, mic) / 343.0;
        let peak = argmax_abs(&rir.taps) as f64;
        prop_assert!((peak - expected).abs() <= 1.0, "peak {peak}, expected {expected}");
    }

    #[test]
    fn rir_energy_grows_with_reflectivity(src in point(), mic in point(), b1 in 0.0f64..0.95, db in 0.01f64..0.05) {
        prop_assume!(dist(src, mic) > 0.1);
        let lo = simulate_rir(ROOM, b1, src, mic, 8000, 0.15).unwrap();
        let hi = simulate_rir(ROOM, b1 + db, src, mic, 8000, 0.15).unwrap();
        prop_assert!(hi.energy() > lo.energy());
    }
}

#[test]
fn rendering_is_deterministic() {
    let (scene, signals) = small_scene(11, 40.0);
    let a = render_scene(&scene, &signals).unwrap();
    let b = render_scene(&scene, &signals).unwrap();
    assert_eq!(a.mixture, b.mixture);
    let (scene, _) = small_scene(12, 40.0);
    let c = render_scene(&scene, &signals).unwrap();
    assert_ne!(a.mixture, c.mixture);
}

#[test]
fn noiseless_mixture_is_the_sum_of_images() {
    let (scene, signals) = small_scene(3, f64::INFINITY);
    let r = render_scene(&scene, &signals).unwrap();
    for q in 0..3 {
        for t in 0..r.mixture.len() {
            let sum: f64 = r.per_source_images.iter().map(|img| img.channel(q)[t]).sum();
            assert!((r.mixture.channel(q)[t] - sum).abs() <= 1e-12);
        }
    }
}

#[test]
fn rendered_background_hits_the_requested_snr() {
    let (scene, signals) = small_scene(5, f64::INFINITY);
    let r = render_scene(&scene, &signals).unwrap();
    let speech: Vec<(&AudioBuffer, f64)> = r.speech_indices().iter().map(|&i| (&r.per_source_images[i], 1.0)).collect();
    let speech = retm_core::room::superpose(&speech).unwrap();
    let noise = &r.per_source_images[2];
    // Already calibrated, so the remaining correction is unity.
    assert!((scale_to_snr(&speech, noise, 5.0).unwrap() - 1.0).abs() < 1e-10);
}
