//! Projection-based SIR/SDR evaluation and spectrogram export.
//!
//! An estimate is split into a part explained by the target reference, a
//! part explained by the other references and a remainder. Only scalar
//! projections are used, so a filtered copy of the target counts as error.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retm::GroupAssignment;
use crate::room::RenderedScene;
use crate::signal::{magnitude_db, mean_square, AudioBuffer, Spectrogram};

/// References whose normalised Gram matrix is worse conditioned than this
/// are treated as linearly dependent.
pub const MAX_GRAM_CONDITION: f64 = 1e10;

/// Energies below this fraction of the estimate energy count as zero.
const ZERO_ENERGY: f64 = 1e-24;

#[derive(Debug, Clone, PartialEq)]
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn energy(a: &[f64]) -> f64 {
    dot(a, a)
}

/// Splits `estimate` against `references`. The estimate is zero-padded or
/// truncated to the reference length.
pub fn bss_decompose(
    estimate: &[f64],
    references: &[&[f64]],
    target_index: usize,
) -> Result<BssDecomposition> {
    let first = references
        .first()
        .ok_or_else(|| Error::invalid("no reference signals"))?;
    let n = first.len();
    if target_index >= references.len() {
        return Err(Error::invalid(format!(
            "target index {target_index} out of range for {} references",
            references.len()
        )));
    }
    if references.iter().any(|r| r.len() != n) {
        return Err(Error::invalid("references differ in length"));
    }
    let norms: Vec<f64> = references.iter().map(|r| energy(r).sqrt()).collect();
    if let Some(i) = norms.iter().position(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::DegenerateInput(format!("reference {i} has zero or non-finite energy")));
    }
    if estimate.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("estimate contains non-finite samples"));
    }
    let mut est = estimate.to_vec();
    est.resize(n, 0.0);

    let k = references.len();
    // Normalised Gram matrix, so the condition reflects linear dependence
    // rather than level differences between sources.
    let gram = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            1.0
        } else {
            dot(references[i], references[j]) / (norms[i] * norms[j])
        }
    });
    let eig = gram.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_GRAM_CONDITION) {
        return Err(Error::DegenerateReference(cond));
    }
    let rhs = DVector::from_fn(k, |i, _| dot(references[i], &est) / norms[i]);
    let coeffs = gram
        .cholesky()
        .ok_or(Error::DegenerateReference(cond))?
        .solve(&rhs);

    let target = references[target_index];
    let alpha = dot(&est, target) / (norms[target_index] * norms[target_index]);
    let s_target: Vec<f64> = target.iter().map(|v| alpha * v).collect();
    let mut span = vec![0.0; n];
    for (r, (c, norm)) in references.iter().zip(coeffs.iter().zip(&norms)) {
        let w = c / norm;
        span.iter_mut().zip(r.iter()).for_each(|(s, v)| *s += w * v);
    }
    let e_interf: Vec<f64> = span.iter().zip(&s_target).map(|(p, s)| p - s).collect();
    let e_artif: Vec<f64> = est.iter().zip(&span).map(|(e, p)| e - p).collect();
    Ok(BssDecomposition {
        s_target,
        e_interf,
        e_artif,
    })
}

fn ratio_db(num: f64, den: f64, scale: f64) -> f64 {
    let zero = ZERO_ENERGY * scale;
    if num <= zero {
        f64::NEG_INFINITY
    } else if den <= zero {
        f64::INFINITY
    } else {
        10.0 * (num / den).log10()
    }
}

/// `(SIR, SDR)` in dB. An estimate without target content reads `-inf`,
/// one without interference or distortion reads `+inf`.
pub fn sir_sdr(d: &BssDecomposition) -> (f64, f64) {
    let s = energy(&d.s_target);
    let i = energy(&d.e_interf);
    let distortion: f64 = d
        .e_interf
        .iter()
        .zip(&d.e_artif)
        .map(|(a, b)| (a + b) * (a + b))
        .sum();
    let scale = s + i + energy(&d.e_artif);
    (ratio_db(s, i, scale), ratio_db(s, distortion, scale))
}

/// Lag `l` in `[-max_lag, max_lag]` maximising `|sum_n r[n] x[n + l]|`.
/// Ties go to the smallest `|l|`.
pub fn estimate_lag(reference: &[f64], estimate: &[f64], max_lag: usize) -> isize {
    if reference.is_empty() || estimate.is_empty() {
        return 0;
    }
    let nfft = (reference.len() + estimate.len()).next_power_of_two();
    let mut planner = RealFftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(nfft);
    let inv = planner.plan_fft_inverse(nfft);
    let spectrum = |x: &[f64], fwd: &Arc<dyn realfft::RealToComplex<f64>>| {
        let mut buf = fwd.make_input_vec();
        buf[..x.len()].copy_from_slice(x);
        let mut out = fwd.make_output_vec();
        fwd.process(&mut buf, &mut out).expect("buffer sizes come from the plan");
        out
    };
    let r = spectrum(reference, &fwd);
    let x = spectrum(estimate, &fwd);
    let mut prod: Vec<Complex64> = r.iter().zip(&x).map(|(a, b)| a.conj() * b).collect();
    prod[0].im = 0.0;
    if let Some(last) = prod.last_mut() {
        last.im = 0.0;
    }
    let mut corr = inv.make_output_vec();
    inv.process(&mut prod, &mut corr).expect("buffer sizes come from the plan");

    let max_lag = max_lag.min(nfft / 2 - 1) as isize;
    let at = |l: isize| corr[l.rem_euclid(nfft as isize) as usize].abs();
    let mut best = (0isize, at(0));
    for m in 1..=max_lag {
        for l in [m, -m] {
            let v = at(l);
            if v > best.1 * (1.0 + 1e-12) {
                best = (l, v);
            }
        }
    }
    best.0
}

/// `y[n] = x[n + lag]` over `len` samples, zero outside `x`.
pub fn shift(x: &[f64], lag: isize, len: usize) -> Vec<f64> {
    (0..len as isize)
        .map(|n| {
            let i = n + lag;
            if i >= 0 && (i as usize) < x.len() {
                x[i as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Metrics of one speech source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerMetrics {
    /// Index of the source in the scene.
    pub source_index: usize,
    #[serde(with = "crate::serde_util::db")]
    pub unprocessed_sir_db: f64,
    #[serde(with = "crate::serde_util::db")]
    pub output_sir_db: f64,
    /// Unprocessed SDR is not reported for raw mixtures.
    pub unprocessed_sdr_note: String,
    #[serde(with = "crate::serde_util::db")]
    pub output_sdr_db: f64,
    /// Delay, in samples, removed from the estimate before scoring.
    pub alignment_lag: isize,
}

/// Scene facts recorded alongside the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSummary {
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    pub microphones: usize,
    pub speech_sources: usize,
    pub noise_sources: usize,
    pub noise_gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    pub speakers: Vec<SpeakerMetrics>,
    pub scene: SceneSummary,
    pub q_a: usize,
    pub q_b: usize,
    /// Position of the scored channel within group A.
    pub eval_channel: usize,
    /// Microphone index of the scored channel.
    pub eval_microphone: usize,
    /// Speech-to-background ratio averaged over microphones, sensor noise
    /// excluded.
    #[serde(with = "crate::serde_util::db")]
    pub snr_db: f64,
}

impl SeparationReport {
    pub fn mean_output_sir_db(&self) -> f64 {
        mean(self.speakers.iter().map(|s| s.output_sir_db))
    }

    pub fn mean_unprocessed_sir_db(&self) -> f64 {
        mean(self.speakers.iter().map(|s| s.unprocessed_sir_db))
    }

    pub fn mean_output_sdr_db(&self) -> f64 {
        mean(self.speakers.iter().map(|s| s.output_sdr_db))
    }

    /// Output minus unprocessed SIR per speaker.
    pub fn sir_improvements_db(&self) -> Vec<f64> {
        self.speakers
            .iter()
            .map(|s| s.output_sir_db - s.unprocessed_sir_db)
            .collect()
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// References and mixture channel of one evaluation microphone.
struct EvalChannel<'a> {
    mic: usize,
    speech: Vec<usize>,
    references: Vec<&'a [f64]>,
    mixture: &'a [f64],
}

impl<'a> EvalChannel<'a> {
    fn new(rendered: &'a RenderedScene, groups: &GroupAssignment, eval_channel: usize) -> Result<Self> {
        groups.validate(rendered.mixture.num_channels())?;
        let mic = *groups.group_a.get(eval_channel).ok_or_else(|| {
            Error::invalid(format!(
                "eval channel {eval_channel} out of range for {} group-A microphones",
                groups.q_a()
            ))
        })?;
        if rendered.per_source_images.len() != rendered.roles.len() {
            return Err(Error::invalid("rendered scene lacks per-source images"));
        }
        let speech = rendered.speech_indices();
        let references = speech
            .iter()
            .map(|&s| rendered.per_source_images[s].channel(mic))
            .collect();
        Ok(Self {
            mic,
            speech,
            references,
            mixture: rendered.mixture.channel(mic),
        })
    }

    fn score(&self, signal: &[f64], target: usize, max_lag: usize) -> Result<(f64, f64, isize)> {
        let lag = estimate_lag(self.references[target], signal, max_lag);
        let aligned = shift(signal, lag, self.mixture.len());
        let (sir, sdr) = sir_sdr(&bss_decompose(&aligned, &self.references, target)?);
        Ok((sir, sdr, lag))
    }

    fn speaker(&self, estimate: &AudioBuffer, k: usize, max_lag: usize) -> Result<SpeakerMetrics> {
        if estimate.num_channels() == 0 {
            return Err(Error::invalid(format!("estimate {k} has no channels")));
        }
        let (unprocessed_sir_db, _, _) = self.score(self.mixture, k, max_lag)?;
        let (output_sir_db, output_sdr_db, alignment_lag) =
            self.score(estimate.channel(0), k, max_lag)?;
        Ok(SpeakerMetrics {
            source_index: self.speech[k],
            unprocessed_sir_db,
            output_sir_db,
            unprocessed_sdr_note: "-".into(),
            output_sdr_db,
            alignment_lag,
        })
    }
}

/// Scores the estimate of the `k`-th speech source (in scene order) only.
pub fn evaluate_speaker(
    rendered: &RenderedScene,
    estimate: &AudioBuffer,
    groups: &GroupAssignment,
    eval_channel: usize,
    max_lag: usize,
    k: usize,
) -> Result<SpeakerMetrics> {
    let ch = EvalChannel::new(rendered, groups, eval_channel)?;
    if k >= ch.speech.len() {
        return Err(Error::invalid(format!(
            "speaker {k} out of range for {} speech sources",
            ch.speech.len()
        )));
    }
    ch.speaker(estimate, k, max_lag)
}

/// Scores one estimate per speech source against the reverberant speech
/// images at group-A channel `eval_channel`. Each estimate, and the raw
/// mixture for the unprocessed figures, is delay-aligned to its reference
/// within `max_lag` samples.
pub fn evaluate_scenario(
    rendered: &RenderedScene,
    estimates: &[AudioBuffer],
    groups: &GroupAssignment,
    eval_channel: usize,
    max_lag: usize,
) -> Result<SeparationReport> {
    let ch = EvalChannel::new(rendered, groups, eval_channel)?;
    if estimates.len() != ch.speech.len() {
        return Err(Error::invalid(format!(
            "{} estimates for {} speech sources",
            estimates.len(),
            ch.speech.len()
        )));
    }
    let speakers = estimates
        .iter()
        .enumerate()
        .map(|(k, est)| ch.speaker(est, k, max_lag))
        .collect::<Result<Vec<_>>>()?;
    Ok(build_report(rendered, groups, eval_channel, ch.mic, speakers))
}

/// Assembles a report from per-speaker rows scored elsewhere.
pub fn build_report(
    rendered: &RenderedScene,
    groups: &GroupAssignment,
    eval_channel: usize,
    eval_microphone: usize,
    speakers: Vec<SpeakerMetrics>,
) -> SeparationReport {
    let speech = rendered.speech_indices().len();
    SeparationReport {
        speakers,
        scene: SceneSummary {
            sample_rate_hz: rendered.mixture.sample_rate_hz(),
            duration_s: rendered.mixture.duration_s(),
            microphones: rendered.mixture.num_channels(),
            speech_sources: speech,
            noise_sources: rendered.roles.len() - speech,
            noise_gain: rendered.noise_gain,
        },
        q_a: groups.q_a(),
        q_b: groups.q_b(),
        eval_channel,
        eval_microphone,
        snr_db: measured_snr_db(rendered),
    }
}

fn measured_snr_db(rendered: &RenderedScene) -> f64 {
    let mics = rendered.mixture.num_channels();
    let len = rendered.mixture.len();
    let speech = rendered.speech_indices();
    let mut total = 0.0;
    for m in 0..mics {
        let mut s = vec![0.0; len];
        let mut n = vec![0.0; len];
        for (i, img) in rendered.per_source_images.iter().enumerate() {
            let acc = if speech.contains(&i) { &mut s } else { &mut n };
            acc.iter_mut().zip(img.channel(m)).for_each(|(a, v)| *a += v);
        }
        total += 10.0 * (mean_square(&s) / mean_square(&n)).log10();
    }
    total / mics as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpectrogramFormat {
    Csv,
    Png,
}

/// Magnitude grid read back from a CSV export, `[bins x frames]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeGrid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

fn channel_grid(spec: &Spectrogram, channel: usize, floor_db: f64) -> Result<Vec<f64>> {
    if channel >= spec.channels() {
        return Err(Error::invalid(format!(
            "channel {channel} out of range for {} channels",
            spec.channels()
        )));
    }
    Ok(magnitude_db(spec, floor_db)
        .into_iter()
        .skip(channel)
        .step_by(spec.channels())
        .collect())
}

/// Writes the dB magnitude of one channel. CSV rows are bins and columns
/// frames, preceded by `#` header lines with the axis scales. PNG puts
/// time on x and frequency on y (low frequencies at the bottom).
pub fn export_spectrogram(
    spec: &Spectrogram,
    channel: usize,
    path: &Path,
    format: SpectrogramFormat,
    floor_db: f64,
) -> Result<()> {
    let grid = channel_grid(spec, channel, floor_db)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    match format {
        SpectrogramFormat::Csv => write_csv(spec, &grid, floor_db, &mut w),
        SpectrogramFormat::Png => write_png(spec, &grid, floor_db, &mut w),
    }
    .map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn join(values: impl Iterator<Item = f64>) -> String {
    let mut s = String::new();
    for (i, v) in values.enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

fn write_csv(spec: &Spectrogram, grid: &[f64], floor_db: f64, w: &mut impl Write) -> std::io::Result<()> {
    let (bins, frames) = (spec.bins(), spec.frames());
    writeln!(
        w,
        "# magnitude_db rows={bins} cols={frames} sample_rate_hz={} window_len={} hop={} floor_db={floor_db}",
        spec.sample_rate_hz(),
        spec.params().window_len,
        spec.params().hop
    )?;
    writeln!(w, "# frequency_hz,{}", join((0..bins).map(|b| spec.bin_frequency_hz(b))))?;
    writeln!(w, "# time_s,{}", join((0..frames).map(|t| spec.frame_time_s(t))))?;
    for row in grid.chunks(frames) {
        writeln!(w, "{}", join(row.iter().copied()))?;
    }
    Ok(())
}

fn write_png(spec: &Spectrogram, grid: &[f64], floor_db: f64, w: &mut impl Write) -> std::io::Result<()> {
    let (bins, frames) = (spec.bins(), spec.frames());
    let top = grid.iter().copied().fold(floor_db, f64::max);
    let span = top - floor_db;
    let mut pixels = Vec::with_capacity(bins * frames);
    for bin in (0..bins).rev() {
        for v in &grid[bin * frames..(bin + 1) * frames] {
            let level = if span > 0.0 { (v - floor_db) / span } else { 0.0 };
            pixels.push((level * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let mut enc = png::Encoder::new(w, frames as u32, bins as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(std::io::Error::other)?;
    writer.write_image_data(&pixels).map_err(std::io::Error::other)?;
    writer.finish().map_err(std::io::Error::other)
}

/// Parses a CSV written by [`export_spectrogram`], skipping header lines.
pub fn read_magnitude_csv(path: &Path) -> Result<MagnitudeGrid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let before = values.len();
        for field in line.split(',') {
            values.push(field.trim().parse::<f64>().map_err(|e| {
                Error::invalid(format!("{}: row {rows}: {e}", path.display()))
            })?);
        }
        let width = values.len() - before;
        if *cols.get_or_insert(width) != width {
            return Err(Error::invalid(format!("{}: ragged row {rows}", path.display())));
        }
        rows += 1;
    }
    Ok(MagnitudeGrid {
        rows,
        cols: cols.unwrap_or(0),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::room::SourceRole;
    use crate::signal::StftParams;

    fn noise(len: usize, seed: u64) -> Vec<f64> {
        // Small LCG, enough to get uncorrelated test vectors.
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..len)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn identical_estimate_has_no_error() {
        let r1 = noise(500, 1);
        let r2 = noise(500, 2);
        let d = bss_decompose(&r1, &[&r1, &r2], 0).unwrap();
        assert!(energy(&d.e_interf).sqrt() <= 1e-12);
        assert!(energy(&d.e_artif).sqrt() <= 1e-12);
        let (sir, sdr) = sir_sdr(&d);
        assert_eq!((sir, sdr), (f64::INFINITY, f64::INFINITY));
    }

    #[test]
    fn orthonormal_references() {
        let r1 = [1.0, 0.0, 0.0, 0.0];
        let r2 = [0.0, 1.0, 0.0, 0.0];
        let est = [1.0, 0.1, 0.0, 0.0];
        let d = bss_decompose(&est, &[&r1, &r2], 0).unwrap();
        assert!((energy(&d.s_target).sqrt() - 1.0).abs() < 1e-12);
        assert!((energy(&d.e_interf).sqrt() - 0.1).abs() < 1e-12);
        assert_eq!(energy(&d.e_artif), 0.0);
        let (sir, sdr) = sir_sdr(&d);
        assert!((sir - 20.0).abs() < 1e-9);
        assert!((sdr - 20.0).abs() < 1e-9);
    }

    #[test]
    fn scaled_target_is_absorbed() {
        let r1 = noise(300, 3);
        let r2 = noise(300, 4);
        let est: Vec<f64> = r1.iter().map(|v| 0.5 * v).collect();
        let d = bss_decompose(&est, &[&r1, &r2], 0).unwrap();
        for (a, b) in d.s_target.iter().zip(&est) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(energy(&d.e_interf) < 1e-24 && energy(&d.e_artif) < 1e-24);
    }

    #[test]
    fn orthogonal_estimate_reads_minus_infinity() {
        let r1 = [1.0, 0.0, 0.0];
        let r2 = [0.0, 1.0, 0.0];
        let d = bss_decompose(&[0.0, 2.0, 1.0], &[&r1, &r2], 0).unwrap();
        assert_eq!(sir_sdr(&d), (f64::NEG_INFINITY, f64::NEG_INFINITY));
    }

    #[test]
    fn dependent_references_rejected() {
        let r1 = noise(100, 5);
        let r2: Vec<f64> = r1.iter().map(|v| -3.0 * v).collect();
        assert!(matches!(
            bss_decompose(&r1, &[&r1, &r2], 0),
            Err(Error::DegenerateReference(_))
        ));
        assert!(matches!(
            bss_decompose(&r1, &[&r1, &[0.0; 100]], 0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(bss_decompose(&r1, &[&r1], 1).is_err());
        assert!(bss_decompose(&r1, &[&r1, &r1[..50]], 0).is_err());
    }

    #[test]
    fn estimate_is_padded_or_truncated() {
        let r1 = [1.0, 0.0, 0.0, 0.0];
        let r2 = [0.0, 0.0, 1.0, 0.0];
        let d = bss_decompose(&[1.0, 0.5], &[&r1, &r2], 0).unwrap();
        assert_eq!(d.e_artif, vec![0.0, 0.5, 0.0, 0.0]);
        let d = bss_decompose(&[1.0, 0.0, 0.2, 0.0, 9.0], &[&r1, &r2], 0).unwrap();
        assert!((d.e_interf[2] - 0.2).abs() < 1e-15);
    }

    #[test]
    fn lag_recovery() {
        let r = noise(2000, 7);
        let delayed = shift(&r, -37, 2000);
        assert_eq!(estimate_lag(&r, &delayed, 100), 37);
        let early = shift(&r, 12, 2000);
        assert_eq!(estimate_lag(&r, &early, 100), -12);
        let flipped: Vec<f64> = delayed.iter().map(|v| -v).collect();
        assert_eq!(estimate_lag(&r, &flipped, 100), 37);
        assert_eq!(estimate_lag(&r, &delayed, 10).abs() <= 10, true);
        assert_eq!(shift(&[1.0, 2.0, 3.0], 1, 4), vec![2.0, 3.0, 0.0, 0.0]);
    }

    fn toy_scene() -> RenderedScene {
        let len = 4000;
        let mk = |seed: u64, gain: f64| {
            let chans = (0..3)
                .map(|m| noise(len, seed * 10 + m).into_iter().map(|v| v * gain).collect())
                .collect();
            AudioBuffer::new(chans, 8000).unwrap()
        };
        let images = vec![mk(1, 1.0), mk(2, 0.5), mk(3, 0.3)];
        let mut mixture = AudioBuffer::zeros(3, len, 8000);
        for img in &images {
            mixture.add_scaled(img, 1.0).unwrap();
        }
        RenderedScene {
            mixture,
            per_source_images: images,
            gains: vec![1.0, 1.0, 0.3],
            roles: vec![SourceRole::Speech, SourceRole::Speech, SourceRole::Noise],
            noise_gain: 0.3,
        }
    }

    #[test]
    fn oracle_and_identity_estimates() {
        let scene = toy_scene();
        let groups = GroupAssignment::contiguous(2, 1);
        let oracle: Vec<AudioBuffer> = [0, 1]
            .iter()
            .map(|&s| scene.per_source_images[s].select_channels(&[1]).unwrap())
            .collect();
        let report = evaluate_scenario(&scene, &oracle, &groups, 1, 64).unwrap();
        assert_eq!(report.eval_microphone, 1);
        for s in &report.speakers {
            assert_eq!(s.output_sir_db, f64::INFINITY);
            assert!(s.output_sir_db > s.unprocessed_sir_db);
            assert_eq!(s.unprocessed_sdr_note, "-");
        }

        let mix = scene.mixture.select_channels(&[1]).unwrap();
        let report = evaluate_scenario(&scene, &[mix.clone(), mix], &groups, 1, 64).unwrap();
        for s in &report.speakers {
            assert!((s.output_sir_db - s.unprocessed_sir_db).abs() < 0.01);
        }
        // Speaker 0 is 6 dB louder than speaker 1.
        let s = &report.speakers;
        assert!(s[0].unprocessed_sir_db > 0.0 && s[1].unprocessed_sir_db < 0.0);
        assert!((report.snr_db - 10.0 * (1.25f64 / 0.09).log10()).abs() < 0.3);
        let json = serde_json::to_string(&report).unwrap();
        let back: SeparationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.speakers[0].output_sir_db, report.speakers[0].output_sir_db);
    }

    #[test]
    fn evaluate_rejects_bad_inputs() {
        let scene = toy_scene();
        let groups = GroupAssignment::contiguous(2, 1);
        let one = scene.mixture.select_channels(&[0]).unwrap();
        assert!(evaluate_scenario(&scene, &[one.clone()], &groups, 0, 8).is_err());
        assert!(evaluate_scenario(&scene, &[one.clone(), one], &groups, 2, 8).is_err());
    }

    fn small_spec() -> Spectrogram {
        let params = StftParams::new(2);
        let data = vec![
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 10.0),
            Complex64::new(0.1, 0.0),
            Complex64::new(0.0, 0.0),
        ];
        Spectrogram::from_parts(data, 2, 1, params, 8000, 3).unwrap()
    }

    #[test]
    fn csv_round_trip() {
        let dir = std::env::temp_dir().join(format!("retm-metrics-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("s.csv");
        let spec = small_spec();
        export_spectrogram(&spec, 0, &path, SpectrogramFormat::Csv, -120.0).unwrap();
        let grid = read_magnitude_csv(&path).unwrap();
        assert_eq!((grid.rows, grid.cols), (2, 2));
        let expected = [0.0, 20.0, -20.0, -120.0];
        for (a, b) in grid.values.iter().zip(expected) {
            assert!((a - b).abs() < 1e-6);
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with('#')).count(), 3);

        let png_path = dir.join("s.png");
        export_spectrogram(&spec, 0, &png_path, SpectrogramFormat::Png, -120.0).unwrap();
        assert!(export_spectrogram(&spec, 1, &png_path, SpectrogramFormat::Png, -120.0).is_err());
        assert!(matches!(
            export_spectrogram(&spec, 0, &dir.join("missing/x.csv"), SpectrogramFormat::Csv, -120.0),
            Err(Error::Io { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
