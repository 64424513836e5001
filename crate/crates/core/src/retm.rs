//! Relative transfer matrix (ReTM) estimation and subtraction-based speaker
//! separation.
//!
//! The microphones are split into groups A and B. For a fixed set of active
//! sources with transfer matrices `H_A` (`Q_A x L`) and `H_B` (`Q_B x L`),
//! the ReTM `R = H_A H_B^+` maps the field at B onto the field at A. It is
//! estimated blindly from a segment in which only the undesired sources are
//! active as `R = P_AA pinv(P_BA)`, and the undesired sources are then
//! removed from a mixture by `S_hat = M_A - R M_B`.

use std::ops::Range;

use log::{debug, warn};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    bin_covariance, check_compatible, check_frame_range, ComplexMatrix, Svd,
};
use crate::signal::{istft, stft, AudioBuffer, Spectrogram, StftParams};

/// Bins whose cross-covariance condition number (over the singular values
/// kept by the pseudoinverse) exceeds this fall back to `R = 0`.
pub const MAX_CONDITION: f64 = 1e8;

/// Training segments shorter than this many frames per microphone trigger
/// a warning.
pub const FRAMES_PER_MIC_WARNING: usize = 5;

/// Disjoint microphone groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupAssignment {
    pub group_a: Vec<usize>,
    pub group_b: Vec<usize>,
}

impl GroupAssignment {
    pub fn new(group_a: Vec<usize>, group_b: Vec<usize>) -> Self {
        Self { group_a, group_b }
    }

    /// First `q_a` channels in group A, the following `q_b` in group B.
    pub fn contiguous(q_a: usize, q_b: usize) -> Self {
        Self::new((0..q_a).collect(), (q_a..q_a + q_b).collect())
    }

    pub fn q_a(&self) -> usize {
        self.group_a.len()
    }

    pub fn q_b(&self) -> usize {
        self.group_b.len()
    }

    pub fn validate(&self, num_channels: usize) -> Result<()> {
        if self.group_a.is_empty() || self.group_b.is_empty() {
            return Err(Error::invalid("group_a and group_b must be non-empty"));
        }
        let mut seen = vec![false; num_channels];
        for (name, group) in [("group_a", &self.group_a), ("group_b", &self.group_b)] {
            for &ch in group {
                if ch >= num_channels {
                    return Err(Error::invalid(format!(
                        "{name}: channel {ch} out of range for {num_channels} channels"
                    )));
                }
                if seen[ch] {
                    return Err(Error::invalid(format!(
                        "{name}: channel {ch} assigned twice"
                    )));
                }
                seen[ch] = true;
            }
        }
        Ok(())
    }
}

/// Time intervals, in seconds, of a recording: `t1` holds only undesired
/// sources, `t2` the mixture to separate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSpec {
    pub t1: [f64; 2],
    pub t2: [f64; 2],
}

impl SegmentSpec {
    pub fn validate(&self, duration_s: f64, window_s: f64) -> Result<()> {
        for (name, [a, b]) in [("t1", self.t1), ("t2", self.t2)] {
            if !(a >= 0.0 && b > a && b <= duration_s + 1e-9) {
                return Err(Error::invalid(format!(
                    "{name}: interval [{a}, {b}) not inside a {duration_s} s recording"
                )));
            }
        }
        if self.t1[0] < self.t2[1] && self.t2[0] < self.t1[1] {
            return Err(Error::invalid("t1 and t2 overlap"));
        }
        if self.t1[1] - self.t1[0] < window_s {
            return Err(Error::invalid("t1 is shorter than one STFT window"));
        }
        Ok(())
    }

    pub fn sample_range(interval: [f64; 2], sample_rate_hz: u32) -> Range<usize> {
        let fs = sample_rate_hz as f64;
        (interval[0] * fs).round() as usize..(interval[1] * fs).round() as usize
    }
}

/// Per-bin diagnostics of an estimated ReTM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinDiagnostics {
    /// Condition number of `P_BA` (infinite when rank deficient).
    #[serde(with = "crate::serde_util::db")]
    pub condition_number: f64,
    /// Condition number over the singular values kept by the pseudoinverse.
    #[serde(with = "crate::serde_util::db")]
    pub effective_condition: f64,
    /// Numerical rank of `P_BA` at the pseudoinverse cutoff.
    pub rank: usize,
    /// The bin exceeded [`MAX_CONDITION`] and passes group A through.
    pub fallback: bool,
}

/// Per-bin ReTM of all sources except one target.
#[derive(Debug, Clone, PartialEq)]
pub struct ReTMStack {
    pub matrices: Vec<ComplexMatrix>,
    pub target_id: usize,
    pub frame_count: usize,
    pub rcond_used: f64,
    pub diagnostics: Vec<BinDiagnostics>,
}

impl ReTMStack {
    pub fn bins(&self) -> usize {
        self.matrices.len()
    }

    pub fn q_a(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.rows())
    }

    pub fn q_b(&self) -> usize {
        self.matrices.first().map_or(0, |m| m.cols())
    }

    pub fn with_target(mut self, target_id: usize) -> Self {
        self.target_id = target_id;
        self
    }

    pub fn fallback_bins(&self) -> usize {
        self.diagnostics.iter().filter(|d| d.fallback).count()
    }
}

/// Blind ReTM estimate `R(f) = P_AA(f) pinv(P_BA(f))` from the frames
/// `t1_frames`, during which the target is silent.
pub fn estimate_retm(
    spec_a: &Spectrogram,
    spec_b: &Spectrogram,
    t1_frames: Range<usize>,
    rcond: f64,
) -> Result<ReTMStack> {
    check_compatible(spec_a, spec_b)?;
    check_frame_range(&t1_frames, spec_a.frames())?;
    if !(rcond > 0.0 && rcond < 1.0) {
        return Err(Error::invalid(format!("rcond {rcond} outside (0, 1)")));
    }
    let (qa, qb) = (spec_a.channels(), spec_b.channels());
    let frames = t1_frames.len();
    if frames < qa {
        return Err(Error::invalid(format!(
            "{frames} training frames cannot support {qa} group-A microphones"
        )));
    }
    if frames < FRAMES_PER_MIC_WARNING * qa.max(qb) {
        warn!(
            "only {frames} training frames for {qa}+{qb} microphones; estimates may be unstable"
        );
    }

    let bins = spec_a.bins();
    let mut matrices = Vec::with_capacity(bins);
    let mut diagnostics = Vec::with_capacity(bins);
    for bin in 0..bins {
        let cov = bin_covariance(spec_a, spec_b, bin, t1_frames.clone());
        let svd = Svd::new(&cov.p_ba).map_err(|e| e.at_bin(bin))?;
        let effective = svd.truncated_condition_number(rcond);
        let fallback = !(effective <= MAX_CONDITION);
        let r = if fallback {
            ComplexMatrix::zeros(qa, qb)
        } else {
            cov.p_aa.matmul(&svd.pseudoinverse(rcond))
        };
        if !r.is_finite() {
            return Err(Error::NumericalFailure {
                bin: Some(bin),
                reason: "non-finite ReTM entries".into(),
            });
        }
        diagnostics.push(BinDiagnostics {
            condition_number: svd.condition_number(),
            effective_condition: effective,
            rank: svd.rank(rcond),
            fallback,
        });
        matrices.push(r);
    }
    let stack = ReTMStack {
        matrices,
        target_id: 0,
        frame_count: frames,
        rcond_used: rcond,
        diagnostics,
    };
    debug!(
        "estimated {qa}x{qb} ReTM over {bins} bins from {frames} frames, {} fallback bins",
        stack.fallback_bins()
    );
    Ok(stack)
}

/// `S_hat(f, t) = M_A(f, t) - R(f) M_B(f, t)` over the frames `t2_frames`.
pub fn apply_separation(
    spec_a: &Spectrogram,
    spec_b: &Spectrogram,
    retm: &ReTMStack,
    t2_frames: Range<usize>,
) -> Result<Spectrogram> {
    check_compatible(spec_a, spec_b)?;
    check_frame_range(&t2_frames, spec_a.frames())?;
    if retm.bins() != spec_a.bins() {
        return Err(Error::invalid(format!(
            "ReTM has {} bins, spectrogram has {}",
            retm.bins(),
            spec_a.bins()
        )));
    }
    if retm.q_a() != spec_a.channels() || retm.q_b() != spec_b.channels() {
        return Err(Error::invalid(format!(
            "ReTM is {}x{}, spectrograms carry {} and {} channels",
            retm.q_a(),
            retm.q_b(),
            spec_a.channels(),
            spec_b.channels()
        )));
    }
    let params = *spec_a.params();
    let frames = t2_frames.len();
    let origin_len = if frames == spec_a.frames() {
        spec_a.origin_len()
    } else {
        (frames - 1) * params.hop + params.window_len
    };
    let mut out = Spectrogram::zeros(
        frames,
        spec_a.channels(),
        params,
        spec_a.sample_rate_hz(),
        origin_len,
    );
    for (bin, r) in retm.matrices.iter().enumerate() {
        for (k, t) in t2_frames.clone().enumerate() {
            let a = spec_a.point(bin, t);
            let predicted = r.mul_vec(spec_b.point(bin, t));
            for ((o, a), p) in out.point_mut(bin, k).iter_mut().zip(a).zip(&predicted) {
                *o = a - p;
            }
        }
    }
    Ok(out)
}

/// Group-A estimate of one target speaker with the ReTM that produced it.
#[derive(Debug, Clone)]
pub struct SpeakerSeparation {
    /// One channel per group-A microphone.
    pub channels: AudioBuffer,
    pub retm: ReTMStack,
}

/// STFTs of the two microphone groups.
struct GroupSpectra {
    a: Spectrogram,
    b: Spectrogram,
}

impl GroupSpectra {
    fn new(buffer: &AudioBuffer, groups: &GroupAssignment, params: &StftParams) -> Result<Self> {
        Ok(Self {
            a: stft(&buffer.select_channels(&groups.group_a)?, params)?,
            b: stft(&buffer.select_channels(&groups.group_b)?, params)?,
        })
    }
}

/// Analysis of a mixture recording, shared by every target separated from
/// it. The mixture is padded with `window_len - hop` zeros on both ends so
/// every original sample is covered by fully overlapping frames.
pub struct MixtureAnalysis {
    spectra: GroupSpectra,
    groups: GroupAssignment,
    params: StftParams,
    channels: usize,
    sample_rate_hz: u32,
    pad: usize,
    len: usize,
}

impl MixtureAnalysis {
    pub fn new(mixture: &AudioBuffer, groups: &GroupAssignment, params: &StftParams) -> Result<Self> {
        groups.validate(mixture.num_channels())?;
        params.validate()?;
        let pad = params.window_len - params.hop;
        let padded = mixture.padded(pad, pad);
        Ok(Self {
            spectra: GroupSpectra::new(&padded, groups, params)?,
            groups: groups.clone(),
            params: *params,
            channels: mixture.num_channels(),
            sample_rate_hz: mixture.sample_rate_hz(),
            pad,
            len: mixture.len(),
        })
    }

    /// Removes everything active in `training` from the mixture.
    pub fn separate(&self, training: &AudioBuffer, rcond: f64) -> Result<SpeakerSeparation> {
        if training.num_channels() != self.channels {
            return Err(Error::invalid(format!(
                "mixture has {} channels, training has {}",
                self.channels,
                training.num_channels()
            )));
        }
        if training.sample_rate_hz() != self.sample_rate_hz {
            return Err(Error::invalid("mixture and training sample rates differ"));
        }
        let train = GroupSpectra::new(training, &self.groups, &self.params)?;
        let retm = estimate_retm(&train.a, &train.b, 0..train.a.frames(), rcond)?;
        drop(train);
        let frames = self.spectra.a.frames();
        let out = apply_separation(&self.spectra.a, &self.spectra.b, &retm, 0..frames)?;
        let full = istft(&out)?;
        Ok(SpeakerSeparation {
            channels: full.slice(self.pad..self.pad + self.len),
            retm,
        })
    }
}

/// Full pipeline for one target: the ReTM of the undesired sources is
/// estimated on `training` (target silent) and subtracted from `mixture`.
/// Returns every group-A channel.
pub fn separate_speaker_channels(
    mixture: &AudioBuffer,
    training: &AudioBuffer,
    groups: &GroupAssignment,
    params: &StftParams,
    rcond: f64,
) -> Result<SpeakerSeparation> {
    MixtureAnalysis::new(mixture, groups, params)?.separate(training, rcond)
}

/// Mono estimate of one target speaker at group-A channel `output_channel`.
pub fn separate_speaker(
    mixture: &AudioBuffer,
    training: &AudioBuffer,
    groups: &GroupAssignment,
    params: &StftParams,
    rcond: f64,
    output_channel: usize,
) -> Result<AudioBuffer> {
    if output_channel >= groups.q_a() {
        return Err(Error::invalid(format!(
            "output channel {output_channel} out of range for {} group-A microphones",
            groups.q_a()
        )));
    }
    separate_speaker_channels(mixture, training, groups, params, rcond)?
        .channels
        .select_channels(&[output_channel])
}

/// Separates every target, one training recording per target, reusing the
/// mixture analysis. Results follow the order of `per_target_training`.
pub fn separate_all_detailed(
    mixture: &AudioBuffer,
    per_target_training: &[AudioBuffer],
    groups: &GroupAssignment,
    params: &StftParams,
    rcond: f64,
) -> Result<Vec<SpeakerSeparation>> {
    if per_target_training.is_empty() {
        return Err(Error::invalid("no training recordings given"));
    }
    let mix = MixtureAnalysis::new(mixture, groups, params)?;
    per_target_training
        .iter()
        .enumerate()
        .map(|(target, training)| {
            let mut sep = mix.separate(training, rcond)?;
            sep.retm.target_id = target;
            Ok(sep)
        })
        .collect()
}

/// Mono estimates of every target at group-A channel `output_channel`.
pub fn separate_all(
    mixture: &AudioBuffer,
    per_target_training: &[AudioBuffer],
    groups: &GroupAssignment,
    params: &StftParams,
    rcond: f64,
    output_channel: usize,
) -> Result<Vec<AudioBuffer>> {
    if output_channel >= groups.q_a() {
        return Err(Error::invalid(format!(
            "output channel {output_channel} out of range for {} group-A microphones",
            groups.q_a()
        )));
    }
    separate_all_detailed(mixture, per_target_training, groups, params, rcond)?
        .into_iter()
        .map(|s| s.channels.select_channels(&[output_channel]))
        .collect()
}

/// Per-bin acoustic transfer matrices of a multiplicative mixing model.
#[derive(Debug, Clone, PartialEq)]
pub struct TransferMatrixSet {
    /// `Q_A x L` per bin.
    pub h_a: Vec<ComplexMatrix>,
    /// `Q_B x L` per bin.
    pub h_b: Vec<ComplexMatrix>,
}

impl TransferMatrixSet {
    pub fn sources(&self) -> usize {
        self.h_a.first().map_or(0, |m| m.cols())
    }

    /// Restrict to the source columns in `indices`.
    pub fn select_sources(&self, indices: &[usize]) -> Self {
        Self {
            h_a: self.h_a.iter().map(|m| m.select_columns(indices)).collect(),
            h_b: self.h_b.iter().map(|m| m.select_columns(indices)).collect(),
        }
    }

    /// Exact ReTM `H_A H_B^+` per bin.
    pub fn exact_retm(&self, rcond: f64) -> Result<Vec<ComplexMatrix>> {
        self.h_a
            .iter()
            .zip(&self.h_b)
            .enumerate()
            .map(|(bin, (ha, hb))| {
                Ok(ha.matmul(&Svd::new(hb).map_err(|e| e.at_bin(bin))?.pseudoinverse(rcond)))
            })
            .collect()
    }

    /// Noiseless group spectra `M = H S` for source spectra `sources`
    /// (indexed `[bin][frame]`, each an `L`-vector).
    pub fn mix(
        &self,
        sources: &SourceSpectra,
        params: StftParams,
        sample_rate_hz: u32,
    ) -> Result<(Spectrogram, Spectrogram)> {
        let bins = self.h_a.len();
        if sources.bins() != bins || params.bins() != bins {
            return Err(Error::invalid("source spectra and transfer matrices differ in bins"));
        }
        let frames = sources.frames();
        let origin = (frames - 1) * params.hop + params.window_len;
        let mut spec_a = Spectrogram::zeros(frames, self.h_a[0].rows(), params, sample_rate_hz, origin);
        let mut spec_b = Spectrogram::zeros(frames, self.h_b[0].rows(), params, sample_rate_hz, origin);
        for bin in 0..bins {
            for t in 0..frames {
                let s = sources.get(bin, t);
                spec_a.point_mut(bin, t).copy_from_slice(&self.h_a[bin].mul_vec(s));
                spec_b.point_mut(bin, t).copy_from_slice(&self.h_b[bin].mul_vec(s));
            }
        }
        Ok((spec_a, spec_b))
    }
}

/// Source STFT coefficients `[bins x frames x L]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpectra {
    data: Vec<Complex64>,
    bins: usize,
    frames: usize,
    sources: usize,
}

impl SourceSpectra {
    pub fn new(data: Vec<Complex64>, bins: usize, frames: usize, sources: usize) -> Result<Self> {
        if data.len() != bins * frames * sources || bins == 0 || frames == 0 || sources == 0 {
            return Err(Error::invalid("source spectra shape mismatch"));
        }
        Ok(Self {
            data,
            bins,
            frames,
            sources,
        })
    }

    /// Independent circular complex Gaussian coefficients.
    pub fn random(bins: usize, frames: usize, sources: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..bins * frames * sources)
            .map(|_| complex_normal(&mut rng))
            .collect();
        Self {
            data,
            bins,
            frames,
            sources,
        }
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn sources(&self) -> usize {
        self.sources
    }

    pub fn get(&self, bin: usize, frame: usize) -> &[Complex64] {
        let o = (bin * self.frames + frame) * self.sources;
        &self.data[o..o + self.sources]
    }

    pub fn get_mut(&mut self, bin: usize, frame: usize) -> &mut [Complex64] {
        let o = (bin * self.frames + frame) * self.sources;
        let n = self.sources;
        &mut self.data[o..o + n]
    }

    /// Keep only the sources in `indices`.
    pub fn select_sources(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(self.bins * self.frames * indices.len());
        for bin in 0..self.bins {
            for t in 0..self.frames {
                let s = self.get(bin, t);
                data.extend(indices.iter().map(|&i| s[i]));
            }
        }
        Self {
            data,
            sources: indices.len(),
            ..*self
        }
    }

    pub fn scale(&mut self, k: Complex64) {
        self.data.iter_mut().for_each(|v| *v *= k);
    }
}

fn complex_normal(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// A noiseless multiplicative mixture with known transfer matrices.
#[derive(Debug, Clone)]
pub struct MultiplicativeScene {
    pub transfers: TransferMatrixSet,
    pub sources: SourceSpectra,
    pub spec_a: Spectrogram,
    pub spec_b: Spectrogram,
}

/// STFT parameters consistent with `bins` one-sided bins.
pub fn params_for_bins(bins: usize) -> StftParams {
    StftParams::new(2 * (bins - 1))
}

/// Draws random transfer matrices and source spectra and mixes them
/// exactly per bin: `M_A = H_A S`, `M_B = H_B S`.
pub fn synth_multiplicative_scene(
    sources: usize,
    q_a: usize,
    q_b: usize,
    bins: usize,
    frames: usize,
    seed: u64,
) -> Result<MultiplicativeScene> {
    if sources == 0 || q_a == 0 || bins < 2 {
        return Err(Error::invalid("need at least one source, one group-A mic and two bins"));
    }
    if q_b < sources {
        return Err(Error::invalid(format!(
            "Q_B = {q_b} is smaller than the {sources} sources; the ReTM is not identifiable"
        )));
    }
    if frames < sources {
        return Err(Error::invalid(format!("{frames} frames for {sources} sources")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |rows: usize| -> Vec<ComplexMatrix> {
        (0..bins)
            .map(|_| ComplexMatrix::from_fn(rows, sources, |_, _| complex_normal(&mut rng)))
            .collect()
    };
    let h_a = draw(q_a);
    let h_b = draw(q_b);
    let transfers = TransferMatrixSet { h_a, h_b };
    let spectra = SourceSpectra::random(bins, frames, sources, seed.wrapping_add(0x5eed));
    let params = params_for_bins(bins);
    let (spec_a, spec_b) = transfers.mix(&spectra, params, 16000)?;
    Ok(MultiplicativeScene {
        transfers,
        sources: spectra,
        spec_a,
        spec_b,
    })
}
