//! Synthetic stand-ins for speech and household noise, used when no
//! recordings are supplied. Every generator is deterministic in its seed
//! and returns a mono buffer normalised to [`TARGET_RMS`].

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::signal::{mean_square, AudioBuffer};

pub const TARGET_RMS: f64 = 0.1;

/// Names accepted by [`generate`].
pub const GENERATORS: [&str; 5] = ["speech", "hum", "vacuum", "music", "white"];

/// Builds the named stimulus.
pub fn generate(kind: &str, duration_s: f64, sample_rate_hz: u32, seed: u64) -> Result<AudioBuffer> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(Error::invalid(format!("stimulus duration {duration_s} s")));
    }
    if sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let len = (duration_s * sample_rate_hz as f64).round() as usize;
    let fs = sample_rate_hz as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        "speech" => speech_like(len, fs, &mut rng),
        "hum" => hum(len, fs, &mut rng),
        "vacuum" => vacuum(len, fs, &mut rng),
        "music" => music(len, fs, &mut rng),
        "white" => (0..len).map(|_| gauss(&mut rng)).collect(),
        other => {
            return Err(Error::invalid(format!(
                "unknown generator {other:?}; expected one of {GENERATORS:?}"
            )))
        }
    };
    AudioBuffer::mono(normalise(samples), sample_rate_hz)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normalise(mut x: Vec<f64>) -> Vec<f64> {
    let rms = mean_square(&x).sqrt();
    if rms > 0.0 {
        let g = TARGET_RMS / rms;
        x.iter_mut().for_each(|v| *v *= g);
    }
    x
}

/// Two-pole resonator.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bandwidth: f64, fs: f64) -> Self {
        let r = (-PI * bandwidth / fs).exp();
        let theta = 2.0 * PI * freq / fs;
        Self {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain: 1.0 - r,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bandwidth: f64, fs: f64) {
        let r = (-PI * bandwidth / fs).exp();
        self.a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
        self.a2 = -r * r;
        self.gain = 1.0 - r;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Vowel formant triples (Hz) used for the voiced syllables.
const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [570.0, 840.0, 2410.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
];

/// Syllables of a glottal pulse train through moving formants, separated by
/// fricative bursts and pauses. Each talker gets its own pitch range.
fn speech_like(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base_f0 = rng.random_range(95.0..230.0);
    let mut out = vec![0.0; len];
    let mut formants: Vec<Resonator> = VOWELS[0]
        .iter()
        .map(|&f| Resonator::new(f, 90.0, fs))
        .collect();
    let mut fric = Resonator::new(4500.0, 2500.0, fs);
    let mut phase = 0.0;
    let mut n = 0;
    while n < len {
        // Pause between phrases or a short gap between syllables.
        let gap = if rng.random_bool(0.15) {
            rng.random_range(0.25..0.6)
        } else {
            rng.random_range(0.03..0.09)
        };
        n += (gap * fs) as usize;
        if rng.random_bool(0.4) {
            let dur = (rng.random_range(0.04..0.12) * fs) as usize;
            let amp = rng.random_range(0.15..0.4);
            for i in 0..dur.min(len.saturating_sub(n)) {
                let env = (PI * i as f64 / dur as f64).sin();
                out[n + i] += amp * env * fric.step(gauss(rng));
            }
            n += dur;
        }
        let dur = (rng.random_range(0.12..0.3) * fs) as usize;
        let from = VOWELS[rng.random_range(0..VOWELS.len())];
        let to = VOWELS[rng.random_range(0..VOWELS.len())];
        let f0_start = base_f0 * rng.random_range(0.85..1.2);
        let f0_end = base_f0 * rng.random_range(0.8..1.1);
        let amp = rng.random_range(0.5..1.0);
        for i in 0..dur.min(len.saturating_sub(n)) {
            let x = i as f64 / dur as f64;
            if i % 64 == 0 {
                for (k, r) in formants.iter_mut().enumerate() {
                    let f = from[k] + (to[k] - from[k]) * x;
                    r.retune(f, 60.0 + 40.0 * k as f64, fs);
                }
            }
            let f0 = f0_start + (f0_end - f0_start) * x;
            phase += f0 / fs;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            let excitation = pulse + 0.02 * gauss(rng);
            let env = (PI * x).sin().powf(0.6);
            let voiced: f64 = formants
                .iter_mut()
                .enumerate()
                .map(|(k, r)| r.step(excitation) / (1.0 + k as f64))
                .sum();
            out[n + i] += amp * env * voiced;
        }
        n += dur;
    }
    high_pass(&mut out, 70.0, fs);
    out
}

/// One-pole DC blocker; the unipolar pulse train otherwise leaves every
/// talker with a common low-frequency offset.
fn high_pass(x: &mut [f64], cutoff_hz: f64, fs: f64) {
    let pole = (-2.0 * PI * cutoff_hz / fs).exp();
    let (mut prev_x, mut prev_y) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = *v - prev_x + pole * prev_y;
        prev_x = *v;
        prev_y = y;
        *v = y;
    }
}

/// Mains hum: 50 Hz harmonics with slow amplitude drift and a little hiss.
fn hum(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let weights: Vec<(f64, f64)> = (1..=12)
        .map(|h| (h as f64 * 50.0, rng.random_range(0.0..2.0 * PI)))
        .collect();
    (0..len)
        .map(|n| {
            let t = n as f64 / fs;
            let drift = 1.0 + 0.1 * (2.0 * PI * 0.3 * t).sin();
            let tone: f64 = weights
                .iter()
                .enumerate()
                .map(|(k, (f, p))| (2.0 * PI * f * t + p).sin() / (1.0 + k as f64))
                .sum();
            drift * tone + 0.05 * gauss(rng)
        })
        .collect()
}

/// Vacuum cleaner: broadband noise with a pink-ish tilt and a motor whine.
fn vacuum(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut lp = 0.0;
    let mut whine = Resonator::new(820.0, 40.0, fs);
    (0..len)
        .map(|n| {
            let w = gauss(rng);
            lp = 0.97 * lp + 0.03 * w;
            let t = n as f64 / fs;
            0.6 * w + 4.0 * lp + 0.4 * whine.step(w) * 20.0 + 0.2 * (2.0 * PI * 410.0 * t).sin()
        })
        .collect()
}

/// Background music: random notes of a pentatonic scale with harmonic
/// timbre and exponential decay, two voices.
fn music(len: usize, fs: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    const SCALE: [f64; 10] = [0.0, 2.0, 4.0, 7.0, 9.0, 12.0, 14.0, 16.0, 19.0, 21.0];
    let mut out = vec![0.0; len];
    for voice in 0..2 {
        let root = if voice == 0 { 220.0 } else { 110.0 };
        let mut n = 0;
        while n < len {
            let dur = (rng.random_range(0.2..0.6) * fs) as usize;
            let semis = SCALE[rng.random_range(0..SCALE.len())];
            let f = root * 2f64.powf(semis / 12.0);
            let amp = rng.random_range(0.4..1.0);
            for i in 0..dur.min(len - n) {
                let t = i as f64 / fs;
                let env = (-3.0 * t).exp() * (1.0 - (-200.0 * t).exp());
                let tone: f64 = (1..=6)
                    .map(|h| (2.0 * PI * f * h as f64 * t).sin() / (h * h) as f64)
                    .sum();
                out[n + i] += amp * env * tone;
            }
            n += dur;
        }
    }
    out
}
