//! Shoebox room simulation: image-source impulse responses, scene rendering,
//! background-noise calibration and sensor self-noise.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::AudioBuffer;

/// Speed of sound in m/s.
pub const SPEED_OF_SOUND: f64 = 343.0;

/// Half-width of the fractional-delay kernel; the kernel has
/// `2 * KERNEL_HALF_WIDTH + 1 = 81` taps.
pub const KERNEL_HALF_WIDTH: usize = 40;

/// RIR horizon as a multiple of T60.
pub const RIR_LENGTH_T60: f64 = 1.25;

const WALL_MARGIN_M: f64 = 0.1;
const MIN_SOURCE_MIC_DISTANCE_M: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceRole {
    Speech,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub position: [f64; 3],
    pub role: SourceRole,
    pub signal_id: String,
    /// Level applied to the dry signal before noise calibration.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub gain_db: f64,
}

fn is_zero(v: &f64) -> bool {
    *v == 0.0
}

fn default_thermal_snr_db() -> f64 {
    60.0
}

/// Room, sources, microphones and noise levels of one simulated recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub room_dims: [f64; 3],
    pub t60_s: f64,
    pub sources: Vec<SourceConfig>,
    pub microphones: Vec<[f64; 3]>,
    pub sample_rate_hz: u32,
    pub background_snr_db: f64,
    /// Sensor self-noise level; `null` in JSON (infinity) disables it.
    #[serde(default = "default_thermal_snr_db", with = "crate::serde_util::inf_as_null")]
    pub thermal_snr_db: f64,
    #[serde(default)]
    pub seed: u64,
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check_inside(room: &[f64; 3], p: &[f64; 3], margin: f64, what: &str) -> Result<()> {
    for axis in 0..3 {
        if !p[axis].is_finite() || p[axis] < margin || p[axis] > room[axis] - margin {
            return Err(Error::invalid(format!(
                "{what}: position {p:?} is not at least {margin} m inside the {room:?} m room"
            )));
        }
    }
    Ok(())
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.room_dims.iter().any(|d| !(d.is_finite() && *d > 2.0 * WALL_MARGIN_M)) {
            return Err(Error::invalid(format!(
                "room_dims: {:?} must be finite and larger than the wall margin",
                self.room_dims
            )));
        }
        if !(self.t60_s > 0.0) {
            return Err(Error::invalid(format!("t60_s: {} must be positive", self.t60_s)));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::invalid("sample_rate_hz: must be positive"));
        }
        if self.microphones.is_empty() {
            return Err(Error::invalid("microphones: at least one microphone required"));
        }
        if !self.sources.iter().any(|s| s.role == SourceRole::Speech) {
            return Err(Error::invalid("sources: at least one speech source required"));
        }
        if !self.background_snr_db.is_finite() {
            return Err(Error::invalid("background_snr_db: must be finite"));
        }
        if self.thermal_snr_db.is_nan() || self.thermal_snr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("thermal_snr_db: must be finite or null"));
        }
        for (i, s) in self.sources.iter().enumerate() {
            check_inside(
                &self.room_dims,
                &s.position,
                WALL_MARGIN_M,
                &format!("sources[{i}].position"),
            )?;
            if !s.gain_db.is_finite() {
                return Err(Error::invalid(format!("sources[{i}].gain_db: must be finite")));
            }
            for (j, m) in self.microphones.iter().enumerate() {
                if distance(&s.position, m) < MIN_SOURCE_MIC_DISTANCE_M {
                    return Err(Error::invalid(format!(
                        "sources[{i}].position: closer than {MIN_SOURCE_MIC_DISTANCE_M} m to microphones[{j}]"
                    )));
                }
            }
        }
        for (j, m) in self.microphones.iter().enumerate() {
            check_inside(&self.room_dims, m, WALL_MARGIN_M, &format!("microphones[{j}]"))?;
        }
        Ok(())
    }

    pub fn speech_sources(&self) -> Vec<usize> {
        self.sources_with(SourceRole::Speech)
    }

    pub fn noise_sources(&self) -> Vec<usize> {
        self.sources_with(SourceRole::Noise)
    }

    fn sources_with(&self, role: SourceRole) -> Vec<usize> {
        self.sources
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == role)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn roles(&self) -> Vec<SourceRole> {
        self.sources.iter().map(|s| s.role).collect()
    }
}

/// Uniform wall reflection coefficient from Sabine's formula:
/// `alpha = 0.161 V / (S T60)`, `beta = sqrt(1 - alpha)`.
pub fn reflection_coefficient(room_dims: [f64; 3], t60_s: f64) -> Result<f64> {
    if !(t60_s > 0.0) || room_dims.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
        return Err(Error::invalid("room dimensions and T60 must be positive"));
    }
    let [lx, ly, lz] = room_dims;
    let volume = lx * ly * lz;
    let surface = 2.0 * (lx * ly + lx * lz + ly * lz);
    let alpha = 0.161 * volume / (surface * t60_s);
    if alpha >= 1.0 {
        return Err(Error::InfeasibleConfig(format!(
            "T60 of {t60_s} s is too short for a {room_dims:?} m room (absorption {alpha:.3} >= 1)"
        )));
    }
    Ok((1.0 - alpha).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoomImpulseResponse {
    pub taps: Vec<f64>,
    pub sample_rate_hz: u32,
    pub source_index: usize,
    pub mic_index: usize,
}

impl RoomImpulseResponse {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|v| v * v).sum()
    }

    /// Decay time to -60 dB read from the Schroeder backward integral.
    ///
    /// A least-squares line is fitted to the -5 to -35 dB part of the
    /// energy decay curve, or to -5 to -25 dB when the response never
    /// reaches -35 dB. `None` when not even -25 dB is reached.
    pub fn schroeder_t60(&self) -> Option<f64> {
        let mut edc = vec![0.0; self.taps.len()];
        let mut acc = 0.0;
        for (e, v) in edc.iter_mut().zip(&self.taps).rev() {
            acc += v * v;
            *e = acc;
        }
        let total = *edc.first()?;
        if !(total > 0.0) {
            return None;
        }
        let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
        let lowest = db.iter().copied().fold(f64::INFINITY, f64::min);
        let end = if lowest <= -35.0 {
            -35.0
        } else if lowest <= -25.0 {
            -25.0
        } else {
            return None;
        };
        let fs = self.sample_rate_hz as f64;
        let points: Vec<(f64, f64)> = db
            .iter()
            .enumerate()
            .filter(|(_, d)| (end..=-5.0).contains(*d))
            .map(|(i, d)| (i as f64 / fs, *d))
            .collect();
        let n = points.len() as f64;
        if n < 2.0 {
            return None;
        }
        let (mt, md) = points
            .iter()
            .fold((0.0, 0.0), |(a, b), (t, d)| (a + t / n, b + d / n));
        let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), (t, d)| {
            (sxy + (t - mt) * (d - md), sxx + (t - mt) * (t - mt))
        });
        let slope = sxy / sxx;
        (slope < 0.0).then(|| -60.0 / slope)
    }
}

/// Image-source impulse response of a shoebox room with uniform wall
/// reflection coefficient `beta`.
///
/// Each image contributes `beta^k / (4 pi d)` at delay `d / c`, where `k` is
/// its number of wall reflections, through an 81-tap Hann-windowed sinc
/// fractional-delay kernel. Images arriving after `max_time_s` are dropped.
/// Source and microphone indices in the result are zero; callers set them.
pub fn simulate_rir(
    room_dims: [f64; 3],
    beta: f64,
    source: [f64; 3],
    mic: [f64; 3],
    sample_rate_hz: u32,
    max_time_s: f64,
) -> Result<RoomImpulseResponse> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("reflection coefficient {beta} outside [0, 1]")));
    }
    if sample_rate_hz == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    check_inside(&room_dims, &source, 0.0, "source")?;
    check_inside(&room_dims, &mic, 0.0, "microphone")?;
    let direct = distance(&source, &mic);
    if direct == 0.0 {
        return Err(Error::invalid("source and microphone coincide"));
    }
    if !(max_time_s.is_finite() && max_time_s > direct / SPEED_OF_SOUND) {
        return Err(Error::invalid(format!(
            "max_time_s {max_time_s} does not cover the direct path ({:.4} s)",
            direct / SPEED_OF_SOUND
        )));
    }

    let fs = sample_rate_hz as f64;
    let reach = SPEED_OF_SOUND * max_time_s;
    let len = (max_time_s * fs).ceil() as usize + KERNEL_HALF_WIDTH + 1;
    let mut taps = vec![0.0; len];

    // Per-axis image coordinate offsets (image - mic) with reflection counts.
    let axis_images = |axis: usize| -> Vec<(f64, u32)> {
        let l = room_dims[axis];
        let n_max = (reach / (2.0 * l)).ceil() as i64 + 1;
        let mut out = Vec::new();
        for n in -n_max..=n_max {
            for q in 0..2i64 {
                let pos = (1 - 2 * q) as f64 * source[axis] + 2.0 * n as f64 * l;
                let diff = pos - mic[axis];
                if diff.abs() <= reach {
                    out.push((diff, ((n - q).abs() + n.abs()) as u32));
                }
            }
        }
        out
    };
    let (xs, ys, zs) = (axis_images(0), axis_images(1), axis_images(2));
    let max_refl = [&xs, &ys, &zs]
        .iter()
        .map(|a| a.iter().map(|(_, k)| *k).max().unwrap_or(0))
        .sum::<u32>();
    let beta_pow: Vec<f64> = (0..=max_refl as i32).map(|k| beta.powi(k)).collect();

    let half = KERNEL_HALF_WIDTH as isize;
    let win_scale = PI / (KERNEL_HALF_WIDTH as f64 + 1.0);
    let (cos_k, sin_k): (Vec<f64>, Vec<f64>) = (-half..=half)
        .map(|k| ((k as f64 * win_scale).cos(), (k as f64 * win_scale).sin()))
        .unzip();
    let reach2 = reach * reach;

    for &(dx, kx) in &xs {
        let dx2 = dx * dx;
        for &(dy, ky) in &ys {
            let dxy2 = dx2 + dy * dy;
            if dxy2 > reach2 {
                continue;
            }
            for &(dz, kz) in &zs {
                let d2 = dxy2 + dz * dz;
                if d2 > reach2 {
                    continue;
                }
                let amp = beta_pow[(kx + ky + kz) as usize];
                if amp == 0.0 {
                    continue;
                }
                let d = d2.sqrt();
                let amp = amp / (4.0 * PI * d);
                let tau = d / SPEED_OF_SOUND * fs;
                let centre = tau.round();
                let frac = centre - tau;
                let (sin_frac_w, cos_frac_w) = (frac * win_scale).sin_cos();
                let sin_pi_frac = (PI * frac).sin();
                let centre = centre as isize;
                for (i, k) in (-half..=half).enumerate() {
                    let idx = centre + k;
                    if idx < 0 || idx as usize >= len {
                        continue;
                    }
                    let t = k as f64 + frac;
                    // cos(pi t / (H + 1)) by angle addition.
                    let window = 0.5 * (1.0 + cos_k[i] * cos_frac_w - sin_k[i] * sin_frac_w);
                    let sinc = if t.abs() < 1e-12 {
                        1.0
                    } else {
                        // sin(pi (k + frac)) = (-1)^k sin(pi frac)
                        let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                        sign * sin_pi_frac / (PI * t)
                    };
                    taps[idx as usize] += amp * window * sinc;
                }
            }
        }
    }

    Ok(RoomImpulseResponse {
        taps,
        sample_rate_hz,
        source_index: 0,
        mic_index: 0,
    })
}

fn fft_convolve_len(n: usize) -> usize {
    n.next_power_of_two()
}

/// Full linear convolution, `len(signal) + len(taps) - 1` samples.
pub fn convolve(signal: &[f64], rir: &RoomImpulseResponse) -> Vec<f64> {
    if signal.is_empty() || rir.taps.is_empty() {
        return Vec::new();
    }
    let out_len = signal.len() + rir.taps.len() - 1;
    let mut conv = Convolver::new(signal, rir.taps.len());
    conv.apply(&rir.taps, out_len)
}

/// Convolves one signal with many kernels, reusing the signal spectrum.
pub struct Convolver {
    n: usize,
    signal_spectrum: Vec<num_complex::Complex64>,
    planner: RealFftPlanner<f64>,
}

impl Convolver {
    /// `max_kernel_len` bounds the kernels later passed to [`Convolver::apply`].
    pub fn new(signal: &[f64], max_kernel_len: usize) -> Self {
        let n = fft_convolve_len(signal.len() + max_kernel_len.max(1) - 1);
        let mut planner = RealFftPlanner::<f64>::new();
        let fft = planner.plan_fft_forward(n);
        let mut input = vec![0.0; n];
        input[..signal.len()].copy_from_slice(signal);
        let mut signal_spectrum = fft.make_output_vec();
        fft.process(&mut input, &mut signal_spectrum)
            .expect("buffer sizes come from the planner");
        Self {
            n,
            signal_spectrum,
            planner,
        }
    }

    /// First `out_len` samples of `signal * kernel`.
    pub fn apply(&mut self, kernel: &[f64], out_len: usize) -> Vec<f64> {
        let fft = self.planner.plan_fft_forward(self.n);
        let ifft = self.planner.plan_fft_inverse(self.n);
        assert!(kernel.len() <= self.n);
        let mut input = vec![0.0; self.n];
        input[..kernel.len()].copy_from_slice(kernel);
        let mut spectrum = fft.make_output_vec();
        fft.process(&mut input, &mut spectrum)
            .expect("buffer sizes come from the planner");
        for (k, s) in spectrum.iter_mut().zip(&self.signal_spectrum) {
            *k *= s;
        }
        spectrum[0].im = 0.0;
        if let Some(last) = spectrum.last_mut() {
            last.im = 0.0;
        }
        ifft.process(&mut spectrum, &mut input)
            .expect("buffer sizes come from the planner");
        let scale = 1.0 / self.n as f64;
        input.truncate(out_len.min(self.n));
        input.iter_mut().for_each(|v| *v *= scale);
        input.resize(out_len, 0.0);
        input
    }
}

/// Gain `g` for the noise images such that the microphone-averaged SNR
/// `mean_q 10 log10(P_speech,q / (g^2 P_noise,q))` equals `target_snr_db`.
pub fn scale_to_snr(
    speech_sum: &AudioBuffer,
    noise_sum: &AudioBuffer,
    target_snr_db: f64,
) -> Result<f64> {
    if speech_sum.num_channels() != noise_sum.num_channels() || speech_sum.len() != noise_sum.len()
    {
        return Err(Error::invalid("speech and noise buffers differ in shape"));
    }
    let mut mean_snr = 0.0;
    for q in 0..speech_sum.num_channels() {
        let ps = speech_sum.channel_power(q);
        let pn = noise_sum.channel_power(q);
        if pn <= 0.0 {
            return Err(Error::DegenerateInput(format!("noise has zero power at microphone {q}")));
        }
        if ps <= 0.0 {
            return Err(Error::DegenerateInput(format!("speech has zero power at microphone {q}")));
        }
        mean_snr += 10.0 * (ps / pn).log10();
    }
    mean_snr /= speech_sum.num_channels() as f64;
    Ok(10f64.powf((mean_snr - target_snr_db) / 20.0))
}

/// Seed for a (purpose, index) stream derived from a base seed, so that
/// every random draw is independent of evaluation order.
pub fn derive_seed(base: u64, purpose: &str, index: u64) -> u64 {
    // FNV-1a over the purpose, then a splitmix64 finaliser.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = base ^ h.rotate_left(17) ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adds white Gaussian noise to every channel with variance
/// `channel_power / 10^(snr_db / 10)`. `snr_db = +inf` leaves the buffer
/// unchanged.
///
/// # Panics
/// If `snr_db` is NaN or negative infinity.
pub fn add_thermal_noise(buffer: &AudioBuffer, snr_db: f64, seed: u64) -> AudioBuffer {
    assert!(
        snr_db > f64::NEG_INFINITY,
        "thermal noise SNR must be finite or +inf"
    );
    let mut out = buffer.clone();
    if snr_db == f64::INFINITY {
        return out;
    }
    for q in 0..out.num_channels() {
        let power = buffer.channel_power(q);
        let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
        if sigma == 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(q as u64);
        for v in out.channel_mut(q) {
            let n: f64 = StandardNormal.sample(&mut rng);
            *v += sigma * n;
        }
    }
    out
}

/// `sum_i gain_i * buffer_i` over buffers of equal shape.
pub fn superpose(terms: &[(&AudioBuffer, f64)]) -> Result<AudioBuffer> {
    let (first, _) = terms
        .first()
        .ok_or_else(|| Error::invalid("nothing to superpose"))?;
    let mut out = AudioBuffer::zeros(first.num_channels(), first.len(), first.sample_rate_hz());
    for (buf, gain) in terms {
        out.add_scaled(buf, *gain)?;
    }
    Ok(out)
}

/// A rendered recording and its per-source decomposition.
#[derive(Debug, Clone)]
pub struct RenderedScene {
    pub mixture: AudioBuffer,
    /// Contribution of each source at every microphone, gains applied.
    pub per_source_images: Vec<AudioBuffer>,
    /// Overall scale factor applied to each source's dry signal.
    pub gains: Vec<f64>,
    pub roles: Vec<SourceRole>,
    /// Joint gain applied to the noise sources by SNR calibration.
    pub noise_gain: f64,
}

impl RenderedScene {
    pub fn speech_indices(&self) -> Vec<usize> {
        self.roles
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == SourceRole::Speech)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn thermal_noise(&self) -> AudioBuffer {
        let mut n = self.mixture.clone();
        for img in &self.per_source_images {
            n.add_scaled(img, -1.0).expect("images share the mixture shape");
        }
        n
    }
}

/// Level of each source's dry signal from `gain_db`.
pub fn source_level_gains(scene: &SceneConfig) -> Vec<f64> {
    scene
        .sources
        .iter()
        .map(|s| 10f64.powf(s.gain_db / 20.0))
        .collect()
}

/// Joint noise gain meeting the scene's background SNR for the given unit
/// gain source images. Returns 1 when the scene has no noise sources.
pub fn calibrate_noise_gain(scene: &SceneConfig, raw_images: &[AudioBuffer]) -> Result<f64> {
    let first = raw_images
        .first()
        .ok_or_else(|| Error::invalid("no source images"))?;
    let levels = source_level_gains(scene);
    let (q, len, rate) = (first.num_channels(), first.len(), first.sample_rate_hz());
    let mut speech = AudioBuffer::zeros(q, len, rate);
    let mut noise = AudioBuffer::zeros(q, len, rate);
    for (i, img) in raw_images.iter().enumerate() {
        match scene.sources[i].role {
            SourceRole::Speech => speech.add_scaled(img, levels[i])?,
            SourceRole::Noise => noise.add_scaled(img, levels[i])?,
        }
    }
    for ch in 0..q {
        if speech.channel_power(ch) <= 0.0 {
            return Err(Error::DegenerateInput(format!(
                "speech has zero power at microphone {ch}"
            )));
        }
    }
    if scene.noise_sources().is_empty() {
        return Ok(1.0);
    }
    scale_to_snr(&speech, &noise, scene.background_snr_db)
}

/// Scales unit-gain source images, sums them and adds sensor noise.
///
/// Each source gets `level(gain_db) * extra_gains[i]`, times the calibrated
/// noise gain for noise sources. `extra_gains` is applied after calibration
/// so it does not move the background noise level.
pub fn compose_scene(
    scene: &SceneConfig,
    raw_images: &[AudioBuffer],
    extra_gains: Option<&[f64]>,
    thermal_seed: u64,
) -> Result<RenderedScene> {
    if raw_images.len() != scene.sources.len() {
        return Err(Error::invalid(format!(
            "{} images for {} sources",
            raw_images.len(),
            scene.sources.len()
        )));
    }
    if let Some(extra) = extra_gains {
        if extra.len() != raw_images.len() {
            return Err(Error::invalid("extra gain count differs from source count"));
        }
    }
    let noise_gain = calibrate_noise_gain(scene, raw_images)?;
    let levels = source_level_gains(scene);
    let gains: Vec<f64> = (0..raw_images.len())
        .map(|i| {
            let role_gain = match scene.sources[i].role {
                SourceRole::Speech => 1.0,
                SourceRole::Noise => noise_gain,
            };
            levels[i] * role_gain * extra_gains.map_or(1.0, |e| e[i])
        })
        .collect();
    let images: Vec<AudioBuffer> = raw_images
        .iter()
        .zip(&gains)
        .map(|(img, g)| {
            let mut s = img.clone();
            s.scale(*g);
            s
        })
        .collect();
    let terms: Vec<(&AudioBuffer, f64)> = images.iter().map(|b| (b, 1.0)).collect();
    let clean = superpose(&terms)?;
    let mixture = add_thermal_noise(&clean, scene.thermal_snr_db, thermal_seed);
    Ok(RenderedScene {
        mixture,
        per_source_images: images,
        gains,
        roles: scene.roles(),
        noise_gain,
    })
}

/// A validated scene with its impulse responses.
#[derive(Debug, Clone)]
pub struct RoomModel {
    scene: SceneConfig,
    beta: f64,
    max_time_s: f64,
    rirs: Vec<RoomImpulseResponse>,
}

impl RoomModel {
    pub fn new(scene: &SceneConfig) -> Result<Self> {
        scene.validate()?;
        let beta = reflection_coefficient(scene.room_dims, scene.t60_s)?;
        let max_time_s = RIR_LENGTH_T60 * scene.t60_s;
        let mics = scene.microphones.len();
        let mut rirs = Vec::with_capacity(scene.sources.len() * mics);
        for (s, source) in scene.sources.iter().enumerate() {
            for (m, mic) in scene.microphones.iter().enumerate() {
                let mut rir = simulate_rir(
                    scene.room_dims,
                    beta,
                    source.position,
                    *mic,
                    scene.sample_rate_hz,
                    max_time_s,
                )?;
                rir.source_index = s;
                rir.mic_index = m;
                rirs.push(rir);
            }
        }
        Ok(Self {
            scene: scene.clone(),
            beta,
            max_time_s,
            rirs,
        })
    }

    pub fn scene(&self) -> &SceneConfig {
        &self.scene
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn max_time_s(&self) -> f64 {
        self.max_time_s
    }

    pub fn rir(&self, source: usize, mic: usize) -> &RoomImpulseResponse {
        &self.rirs[source * self.scene.microphones.len() + mic]
    }

    pub fn rir_len(&self) -> usize {
        self.rirs.first().map_or(0, |r| r.taps.len())
    }

    /// Unit-gain image of `source` at every microphone for the samples in
    /// `range` of `signal`. Samples before `range.start` feed the
    /// reverberant tail, as in a continuous recording.
    pub fn source_image(&self, source: usize, signal: &[f64], range: Range<usize>) -> AudioBuffer {
        let warm = range.start.saturating_sub(self.rir_len());
        let end = range.end.min(signal.len());
        let input = &signal[warm..end.max(warm)];
        let skip = range.start - warm;
        let out_len = range.end - range.start;
        let mics = self.scene.microphones.len();
        let mut channels = Vec::with_capacity(mics);
        if input.is_empty() {
            channels.resize(mics, vec![0.0; out_len]);
        } else {
            let mut conv = Convolver::new(input, self.rir_len());
            for m in 0..mics {
                let full = conv.apply(&self.rir(source, m).taps, skip + out_len);
                channels.push(full[skip..].to_vec());
            }
        }
        AudioBuffer::new(channels, self.scene.sample_rate_hz)
            .expect("convolution of finite data is finite")
    }

    /// Renders the scene from dry mono signals keyed by `signal_id`.
    /// Signals are zero-padded to the longest one.
    pub fn render(&self, signals: &BTreeMap<String, AudioBuffer>) -> Result<RenderedScene> {
        let dry = self.dry_signals(signals)?;
        let len = dry.iter().map(|d| d.len()).max().unwrap_or(0);
        let images: Vec<AudioBuffer> = dry
            .iter()
            .enumerate()
            .map(|(s, d)| self.source_image(s, d, 0..len))
            .collect();
        compose_scene(
            &self.scene,
            &images,
            None,
            derive_seed(self.scene.seed, "thermal-mixture", 0),
        )
    }

    /// Looks up and checks each source's dry signal.
    pub fn dry_signals<'a>(
        &self,
        signals: &'a BTreeMap<String, AudioBuffer>,
    ) -> Result<Vec<&'a [f64]>> {
        self.scene
            .sources
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let buf = signals.get(&s.signal_id).ok_or_else(|| {
                    Error::invalid(format!(
                        "sources[{i}]: no signal supplied for signal_id {:?}",
                        s.signal_id
                    ))
                })?;
                if buf.sample_rate_hz() != self.scene.sample_rate_hz {
                    return Err(Error::invalid(format!(
                        "signal {:?} is at {} Hz, scene runs at {} Hz",
                        s.signal_id,
                        buf.sample_rate_hz(),
                        self.scene.sample_rate_hz
                    )));
                }
                if buf.num_channels() != 1 {
                    return Err(Error::invalid(format!("signal {:?} is not mono", s.signal_id)));
                }
                Ok(buf.channel(0))
            })
            .collect()
    }
}

/// Renders `scene` with dry `signals` (one mono buffer per `signal_id`).
pub fn render_scene(
    scene: &SceneConfig,
    signals: &BTreeMap<String, AudioBuffer>,
) -> Result<RenderedScene> {
    RoomModel::new(scene)?.render(signals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::mean_square;

    fn scene_one(beta_t60: f64) -> SceneConfig {
        SceneConfig {
            room_dims: [4.0, 5.0, 3.0],
            t60_s: beta_t60,
            sources: vec![SourceConfig {
                position: [1.0, 1.0, 1.0],
                role: SourceRole::Speech,
                signal_id: "s".into(),
                gain_db: 0.0,
            }],
            microphones: vec![[2.0, 1.0, 1.0], [2.5, 3.0, 1.5]],
            sample_rate_hz: 8000,
            background_snr_db: 0.0,
            thermal_snr_db: f64::INFINITY,
            seed: 1,
        }
    }

    #[test]
    fn sabine_paper_room() {
        let beta = reflection_coefficient([6.0, 7.0, 3.0], 0.5).unwrap();
        let alpha: f64 = 0.161 * 126.0 / (162.0 * 0.5);
        assert!((alpha - 0.2504).abs() < 1e-4);
        assert!((beta - 0.8658).abs() < 1e-4);
        assert!((beta - (1.0 - alpha).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sabine_limits() {
        let b = reflection_coefficient([6.0, 7.0, 3.0], 1e12).unwrap();
        assert!((1.0 - b) < 1e-10);
        // alpha = 1 exactly: T60 = 0.161 V / S.
        let t60 = 0.161 * 126.0 / 162.0;
        assert!(matches!(
            reflection_coefficient([6.0, 7.0, 3.0], t60),
            Err(Error::InfeasibleConfig(_))
        ));
        assert!(reflection_coefficient([6.0, 7.0, 3.0], 0.0).is_err());
    }

    #[test]
    fn anechoic_single_pulse() {
        let rir = simulate_rir([4.0, 5.0, 3.0], 0.0, [1.0, 1.0, 1.0], [2.0, 1.0, 1.0], 16000, 0.1)
            .unwrap();
        let (peak_idx, peak) = rir
            .taps
            .iter()
            .enumerate()
            .fold((0, 0.0), |(bi, bv), (i, v)| if v.abs() > bv { (i, v.abs()) } else { (bi, bv) });
        assert_eq!(peak_idx, 47);
        // Fractional offset of 0.35 samples lowers the sampled peak a bit.
        let amp = 1.0 / (4.0 * PI);
        assert!(peak < amp && peak > 0.5 * amp);
        // Everything outside the kernel support is exactly zero.
        assert!(rir.taps[..7].iter().all(|v| *v == 0.0));
        assert!(rir.taps[88..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rir_argument_checks() {
        assert!(simulate_rir([4.0, 5.0, 3.0], 0.5, [1.0, 1.0, 1.0], [1.0, 1.0, 1.0], 16000, 0.1).is_err());
        assert!(simulate_rir([4.0, 5.0, 3.0], 0.5, [5.0, 1.0, 1.0], [1.0, 2.0, 1.0], 16000, 0.1).is_err());
        assert!(simulate_rir([4.0, 5.0, 3.0], 0.5, [1.0, 1.0, 1.0], [3.0, 1.0, 1.0], 16000, 0.001).is_err());
        assert!(simulate_rir([4.0, 5.0, 3.0], 1.5, [1.0, 1.0, 1.0], [3.0, 1.0, 1.0], 16000, 0.1).is_err());
    }

    #[test]
    fn schroeder_reads_exponential_decay() {
        let fs = 8000u32;
        let t60 = 0.4;
        // Amplitude falls 60 dB over t60, so energy falls 60 dB too.
        let k = 3.0 * std::f64::consts::LN_10 / t60;
        let taps = (0..(0.8 * fs as f64) as usize)
            .map(|n| (-k * n as f64 / fs as f64).exp() * if n % 3 == 0 { 1.0 } else { -0.7 })
            .collect();
        let rir = RoomImpulseResponse {
            taps,
            sample_rate_hz: fs,
            source_index: 0,
            mic_index: 0,
        };
        let est = rir.schroeder_t60().unwrap();
        assert!((est - t60).abs() < 0.01 * t60, "{est}");
        let flat = RoomImpulseResponse {
            taps: vec![1.0; 100],
            ..rir
        };
        assert_eq!(flat.schroeder_t60(), None);
    }

    #[test]
    fn hand_convolutions() {
        let unit = RoomImpulseResponse {
            taps: vec![1.0],
            sample_rate_hz: 1,
            source_index: 0,
            mic_index: 0,
        };
        let x = vec![0.5, -1.0, 2.0];
        let y = convolve(&x, &unit);
        for (a, b) in y.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
        let ones = RoomImpulseResponse {
            taps: vec![1.0, 1.0],
            ..unit
        };
        let y = convolve(&[1.0, 1.0], &ones);
        assert_eq!(y.len(), 3);
        for (a, b) in y.iter().zip([1.0, 2.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn snr_gain_closed_forms() {
        let s = AudioBuffer::new(vec![vec![1.0, -1.0]; 3], 8000).unwrap();
        let n = s.clone();
        assert!((scale_to_snr(&s, &n, 0.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((scale_to_snr(&s, &n, -20.0).unwrap() - 10.0).abs() < 1e-9);
        let s = AudioBuffer::mono(vec![2.0, -2.0], 8000).unwrap();
        let n = AudioBuffer::mono(vec![1.0, -1.0], 8000).unwrap();
        assert!((scale_to_snr(&s, &n, 6.02).unwrap() - 1.0).abs() < 1e-3);
        let z = AudioBuffer::mono(vec![0.0, 0.0], 8000).unwrap();
        assert!(matches!(scale_to_snr(&s, &z, 0.0), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn thermal_noise_level_and_determinism() {
        let n = 200_000;
        let x: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let buf = AudioBuffer::mono(x, 16000).unwrap();
        let y = add_thermal_noise(&buf, 60.0, 42);
        let noise: Vec<f64> = y.channel(0).iter().zip(buf.channel(0)).map(|(a, b)| a - b).collect();
        let p = mean_square(&noise);
        assert!((p / 1e-6 - 1.0).abs() < 0.05, "{p}");
        assert_eq!(y, add_thermal_noise(&buf, 60.0, 42));
        assert_ne!(y, add_thermal_noise(&buf, 60.0, 43));
        assert_eq!(add_thermal_noise(&buf, f64::INFINITY, 42), buf);
    }

    #[test]
    fn scene_validation_paths() {
        let mut s = scene_one(0.4);
        s.validate().unwrap();
        s.sources[0].position = [0.05, 1.0, 1.0];
        let e = s.validate().unwrap_err().to_string();
        assert!(e.contains("sources[0].position"), "{e}");
        let mut s = scene_one(0.4);
        s.microphones.push([1.0, 1.0, 1.02]);
        let e = s.validate().unwrap_err().to_string();
        assert!(e.contains("microphones[2]"), "{e}");
        let mut s = scene_one(0.4);
        s.sources[0].role = SourceRole::Noise;
        assert!(s.validate().is_err());
    }

    #[test]
    fn render_without_thermal_noise_is_additive() {
        let scene = scene_one(0.3);
        let sig: Vec<f64> = (0..4000).map(|n| ((n * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let mut signals = BTreeMap::new();
        signals.insert("s".to_string(), AudioBuffer::mono(sig, 8000).unwrap());
        let r = render_scene(&scene, &signals).unwrap();
        assert_eq!(r.mixture, r.per_source_images[0]);
        signals.clear();
        assert!(render_scene(&scene, &signals).is_err());
    }

    #[test]
    fn warm_start_matches_full_convolution() {
        let scene = scene_one(0.2);
        let model = RoomModel::new(&scene).unwrap();
        let sig: Vec<f64> = (0..6000).map(|n| ((n * 13) % 29) as f64 - 14.0).collect();
        let full = model.source_image(0, &sig, 0..6000);
        let part = model.source_image(0, &sig, 4000..6000);
        for m in 0..2 {
            for (a, b) in part.channel(m).iter().zip(&full.channel(m)[4000..]) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn seeds_differ_by_purpose_and_index() {
        let a = derive_seed(7, "thermal", 0);
        assert_eq!(a, derive_seed(7, "thermal", 0));
        assert_ne!(a, derive_seed(7, "thermal", 1));
        assert_ne!(a, derive_seed(7, "training", 0));
        assert_ne!(a, derive_seed(8, "thermal", 0));
    }
}
