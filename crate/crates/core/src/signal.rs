//! Time-frequency analysis and synthesis.
//!
//! Multichannel buffers are stored channel-major. Spectrograms are stored
//! bin-major with the channel axis innermost, so the vector of all channels at
//! one (bin, frame) point is a contiguous slice. That is the access pattern of
//! covariance estimation and per-bin matrix application.

use std::f64::consts::PI;
use std::ops::Range;

use num_complex::Complex64;
use realfft::RealFftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multichannel time-domain samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer {
    channels: Vec<Vec<f64>>,
    sample_rate_hz: u32,
}

impl AudioBuffer {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        if channels.is_empty() {
            return Err(Error::invalid("audio buffer needs at least one channel"));
        }
        let len = channels[0].len();
        if channels.iter().any(|c| c.len() != len) {
            return Err(Error::invalid("all channels must have equal length"));
        }
        if channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("audio samples must be finite"));
        }
        Ok(Self {
            channels,
            sample_rate_hz,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate_hz)
    }

    pub fn zeros(num_channels: usize, len: usize, sample_rate_hz: u32) -> Self {
        assert!(num_channels > 0 && sample_rate_hz > 0);
        Self {
            channels: vec![vec![0.0; len]; num_channels],
            sample_rate_hz,
        }
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn channel(&self, index: usize) -> &[f64] {
        &self.channels[index]
    }

    /// Mutable access to one channel. Callers must keep samples finite.
    pub fn channel_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.channels[index]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::invalid("channel selection is empty"));
        }
        let mut channels = Vec::with_capacity(indices.len());
        for &i in indices {
            let ch = self.channels.get(i).ok_or_else(|| {
                Error::invalid(format!(
                    "channel {i} out of range for {}-channel buffer",
                    self.num_channels()
                ))
            })?;
            channels.push(ch.clone());
        }
        Ok(Self {
            channels,
            sample_rate_hz: self.sample_rate_hz,
        })
    }

    /// Samples in `range`; the part of the range past the end is zero-filled.
    pub fn slice(&self, range: Range<usize>) -> Self {
        let len = range.end.saturating_sub(range.start);
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let mut out = vec![0.0; len];
                if range.start < c.len() {
                    let end = range.end.min(c.len());
                    out[..end - range.start].copy_from_slice(&c[range.start..end]);
                }
                out
            })
            .collect();
        Self {
            channels,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Zero-pad `before` samples in front and `after` samples at the end.
    pub fn padded(&self, before: usize, after: usize) -> Self {
        let channels = self
            .channels
            .iter()
            .map(|c| {
                let mut out = vec![0.0; before + c.len() + after];
                out[before..before + c.len()].copy_from_slice(c);
                out
            })
            .collect();
        Self {
            channels,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    /// Mean-square power of one channel (zero for an empty buffer).
    pub fn channel_power(&self, index: usize) -> f64 {
        mean_square(&self.channels[index])
    }

    pub fn max_abs(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn scale(&mut self, gain: f64) {
        assert!(gain.is_finite());
        for v in self.channels.iter_mut().flatten() {
            *v *= gain;
        }
    }

    /// `self += gain * other`, sample by sample.
    pub fn add_scaled(&mut self, other: &AudioBuffer, gain: f64) -> Result<()> {
        if other.num_channels() != self.num_channels() || other.len() != self.len() {
            return Err(Error::invalid("buffer shapes differ"));
        }
        for (dst, src) in self.channels.iter_mut().zip(&other.channels) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += gain * s;
            }
        }
        Ok(())
    }
}

pub(crate) fn mean_square(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// `w[n] = sin(pi (n + 1/2) / N)`: the square root of a half-sample
    /// shifted Hann window. Its squares sum to one at 50% overlap and no
    /// coefficient is zero, so every sample of a frame can be recovered.
    #[default]
    SqrtHann,
}

impl WindowKind {
    pub fn coefficients(self, len: usize) -> Vec<f64> {
        match self {
            WindowKind::SqrtHann => (0..len)
                .map(|n| (PI * (n as f64 + 0.5) / len as f64).sin())
                .collect(),
        }
    }
}

/// STFT analysis parameters. In serialized form `hop` defaults to half the
/// window and `fft_len` to the window length.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "StftParamsRepr")]
pub struct StftParams {
    pub window_len: usize,
    pub hop: usize,
    pub window_kind: WindowKind,
    pub fft_len: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct StftParamsRepr {
    window_len: usize,
    hop: Option<usize>,
    #[serde(default)]
    window_kind: WindowKind,
    fft_len: Option<usize>,
}

impl From<StftParamsRepr> for StftParams {
    fn from(r: StftParamsRepr) -> Self {
        Self {
            window_len: r.window_len,
            hop: r.hop.unwrap_or(r.window_len / 2),
            window_kind: r.window_kind,
            fft_len: r.fft_len.unwrap_or(r.window_len),
        }
    }
}

impl Default for StftParams {
    fn default() -> Self {
        Self::new(8192)
    }
}

impl StftParams {
    /// Square-root Hann window with 50% overlap and no zero padding.
    pub fn new(window_len: usize) -> Self {
        Self {
            window_len,
            hop: window_len / 2,
            window_kind: WindowKind::SqrtHann,
            fft_len: window_len,
        }
    }

    pub fn with_hop(mut self, hop: usize) -> Self {
        self.hop = hop;
        self
    }

    pub fn with_fft_len(mut self, fft_len: usize) -> Self {
        self.fft_len = fft_len;
        self
    }

    pub fn bins(&self) -> usize {
        self.fft_len / 2 + 1
    }

    pub fn window(&self) -> Vec<f64> {
        self.window_kind.coefficients(self.window_len)
    }

    /// Checks sizes and the constant-overlap-add property of the squared
    /// window (analysis times synthesis window) within 1e-12.
    pub fn validate(&self) -> Result<()> {
        if self.window_len < 2 {
            return Err(Error::invalid("window_len must be at least 2"));
        }
        if self.hop == 0 || self.hop > self.window_len {
            return Err(Error::invalid("hop must be in 1..=window_len"));
        }
        if self.fft_len < self.window_len {
            return Err(Error::invalid("fft_len must be >= window_len"));
        }
        let w = self.window();
        let mut sums = vec![0.0; self.hop];
        for (n, wn) in w.iter().enumerate() {
            sums[n % self.hop] += wn * wn;
        }
        let mean = sums.iter().sum::<f64>() / sums.len() as f64;
        if sums.iter().any(|s| (s - mean).abs() > 1e-12 * mean.max(1.0)) {
            return Err(Error::invalid(format!(
                "window/hop pair ({}, {}) violates constant overlap-add",
                self.window_len, self.hop
            )));
        }
        Ok(())
    }

    /// Number of frames needed to cover `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len <= self.window_len {
            1
        } else {
            1 + (len - self.window_len).div_ceil(self.hop)
        }
    }
}

/// Complex one-sided STFT tensor `[bins x frames x channels]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    data: Vec<Complex64>,
    bins: usize,
    frames: usize,
    channels: usize,
    params: StftParams,
    sample_rate_hz: u32,
    origin_len: usize,
}

impl Spectrogram {
    pub fn from_parts(
        data: Vec<Complex64>,
        frames: usize,
        channels: usize,
        params: StftParams,
        sample_rate_hz: u32,
        origin_len: usize,
    ) -> Result<Self> {
        let bins = params.bins();
        if frames == 0 || channels == 0 {
            return Err(Error::invalid("spectrogram needs at least one frame and channel"));
        }
        if data.len() != bins * frames * channels {
            return Err(Error::invalid(format!(
                "spectrogram data has {} values, expected {bins}x{frames}x{channels}",
                data.len()
            )));
        }
        if sample_rate_hz == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            data,
            bins,
            frames,
            channels,
            params,
            sample_rate_hz,
            origin_len,
        })
    }

    pub fn zeros(
        frames: usize,
        channels: usize,
        params: StftParams,
        sample_rate_hz: u32,
        origin_len: usize,
    ) -> Self {
        let bins = params.bins();
        Self {
            data: vec![Complex64::new(0.0, 0.0); bins * frames * channels],
            bins,
            frames,
            channels,
            params,
            sample_rate_hz,
            origin_len,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn origin_len(&self) -> usize {
        self.origin_len
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    fn offset(&self, bin: usize, frame: usize) -> usize {
        (bin * self.frames + frame) * self.channels
    }

    pub fn get(&self, bin: usize, frame: usize, channel: usize) -> Complex64 {
        self.data[self.offset(bin, frame) + channel]
    }

    /// All channels at one time-frequency point.
    pub fn point(&self, bin: usize, frame: usize) -> &[Complex64] {
        let o = self.offset(bin, frame);
        &self.data[o..o + self.channels]
    }

    pub fn point_mut(&mut self, bin: usize, frame: usize) -> &mut [Complex64] {
        let o = self.offset(bin, frame);
        let c = self.channels;
        &mut self.data[o..o + c]
    }

    pub fn scale(&mut self, gain: f64) {
        for v in &mut self.data {
            *v *= gain;
        }
    }

    pub fn select_channels(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.channels) {
            return Err(Error::invalid("channel selection empty or out of range"));
        }
        let mut data = Vec::with_capacity(self.bins * self.frames * indices.len());
        for bin in 0..self.bins {
            for frame in 0..self.frames {
                let p = self.point(bin, frame);
                data.extend(indices.iter().map(|&i| p[i]));
            }
        }
        Ok(Self {
            data,
            channels: indices.len(),
            ..*self
        })
    }

    /// Centre frequency of `bin` in Hz.
    pub fn bin_frequency_hz(&self, bin: usize) -> f64 {
        bin as f64 * self.sample_rate_hz as f64 / self.params.fft_len as f64
    }

    /// Start time of `frame` in seconds.
    pub fn frame_time_s(&self, frame: usize) -> f64 {
        (frame * self.params.hop) as f64 / self.sample_rate_hz as f64
    }
}

/// Short-time Fourier transform. Frame `t` covers samples
/// `[t*hop, t*hop + window_len)`; the tail is zero-padded to fill the last
/// frame.
pub fn stft(buffer: &AudioBuffer, params: &StftParams) -> Result<Spectrogram> {
    params.validate()?;
    let len = buffer.len();
    if len < params.window_len {
        return Err(Error::invalid(format!(
            "buffer of {len} samples is shorter than one {}-sample window",
            params.window_len
        )));
    }
    let frames = params.frames_for(len);
    let channels = buffer.num_channels();
    let bins = params.bins();
    let window = params.window();

    let mut planner = RealFftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(params.fft_len);
    let mut input = fft.make_input_vec();
    let mut output = fft.make_output_vec();
    let mut scratch = fft.make_scratch_vec();

    let mut spec = Spectrogram::zeros(frames, channels, *params, buffer.sample_rate_hz(), len);
    for ch in 0..channels {
        let x = buffer.channel(ch);
        for frame in 0..frames {
            let start = frame * params.hop;
            input.iter_mut().for_each(|v| *v = 0.0);
            for (n, w) in window.iter().enumerate() {
                if let Some(s) = x.get(start + n) {
                    input[n] = w * s;
                }
            }
            fft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| Error::NumericalFailure {
                    bin: None,
                    reason: format!("forward FFT failed: {e}"),
                })?;
            for (bin, v) in output.iter().enumerate().take(bins) {
                let o = spec.offset(bin, frame) + ch;
                spec.data[o] = *v;
            }
        }
    }
    Ok(spec)
}

/// Weighted overlap-add synthesis, normalised by the accumulated squared
/// window and truncated to the original length.
pub fn istft(spec: &Spectrogram) -> Result<AudioBuffer> {
    let params = spec.params;
    params.validate()?;
    if spec.bins != params.bins() || spec.data.len() != spec.bins * spec.frames * spec.channels {
        return Err(Error::invalid("spectrogram shape inconsistent with its parameters"));
    }
    let window = params.window();
    let span = (spec.frames - 1) * params.hop + params.window_len;
    let out_len = spec.origin_len.min(span);

    let mut norm = vec![0.0; span];
    for frame in 0..spec.frames {
        let start = frame * params.hop;
        for (n, w) in window.iter().enumerate() {
            norm[start + n] += w * w;
        }
    }

    let mut planner = RealFftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(params.fft_len);
    let mut input = ifft.make_input_vec();
    let mut output = ifft.make_output_vec();
    let mut scratch = ifft.make_scratch_vec();
    let scale = 1.0 / params.fft_len as f64;
    let even = params.fft_len % 2 == 0;

    let mut channels = Vec::with_capacity(spec.channels);
    for ch in 0..spec.channels {
        let mut acc = vec![0.0; span];
        for frame in 0..spec.frames {
            for (bin, v) in input.iter_mut().enumerate() {
                *v = spec.get(bin, frame, ch);
            }
            // Conjugate symmetry makes these bins real.
            input[0].im = 0.0;
            if even {
                let last = input.len() - 1;
                input[last].im = 0.0;
            }
            ifft.process_with_scratch(&mut input, &mut output, &mut scratch)
                .map_err(|e| Error::NumericalFailure {
                    bin: None,
                    reason: format!("inverse FFT failed: {e}"),
                })?;
            let start = frame * params.hop;
            for (n, w) in window.iter().enumerate() {
                acc[start + n] += output[n] * scale * w;
            }
        }
        let mut samples: Vec<f64> = acc
            .iter()
            .zip(&norm)
            .map(|(a, n)| if *n > 0.0 { a / n } else { 0.0 })
            .collect();
        samples.truncate(out_len);
        samples.resize(spec.origin_len, 0.0);
        channels.push(samples);
    }
    AudioBuffer::new(channels, spec.sample_rate_hz)
}

/// Anti-aliased integer-factor downsampling.
///
/// A zero-phase Blackman-windowed sinc low-pass (cutoff at 90% of the output
/// Nyquist frequency, `64 * factor + 1` taps) is evaluated only at the kept
/// sample positions. Output length is `ceil(len / factor)`.
pub fn decimate(buffer: &AudioBuffer, factor: u32) -> Result<AudioBuffer> {
    if factor == 0 {
        return Err(Error::invalid("decimation factor must be >= 1"));
    }
    let rate = buffer.sample_rate_hz();
    if rate % factor != 0 {
        return Err(Error::UnsupportedRate {
            rate_hz: rate,
            factor,
        });
    }
    if factor == 1 {
        return Ok(buffer.clone());
    }
    let f = factor as usize;
    let half = 32 * f;
    let taps = 2 * half + 1;
    let cutoff = 0.45 / factor as f64; // cycles per input sample
    let mut h: Vec<f64> = (0..taps)
        .map(|k| {
            let t = k as f64 - half as f64;
            let sinc = if t == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * t).sin() / (PI * t)
            };
            let x = k as f64 / (taps - 1) as f64;
            let blackman = 0.42 - 0.5 * (2.0 * PI * x).cos() + 0.08 * (4.0 * PI * x).cos();
            sinc * blackman
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);

    let len = buffer.len();
    let out_len = len.div_ceil(f);
    let channels = buffer
        .channels()
        .iter()
        .map(|x| {
            (0..out_len)
                .map(|m| {
                    let centre = (m * f) as isize;
                    let mut acc = 0.0;
                    for (k, hk) in h.iter().enumerate() {
                        let idx = centre + k as isize - half as isize;
                        if idx >= 0 && (idx as usize) < len {
                            acc += hk * x[idx as usize];
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect();
    AudioBuffer::new(channels, rate / factor)
}

/// `20 log10 |X|` clamped below at `floor_db`, in the spectrogram's
/// `[bins x frames x channels]` layout.
pub fn magnitude_db(spec: &Spectrogram, floor_db: f64) -> Vec<f64> {
    spec.data
        .iter()
        .map(|v| {
            let m = v.norm();
            if m > 0.0 {
                (20.0 * m.log10()).max(floor_db)
            } else {
                floor_db
            }
        })
        .collect()
}
