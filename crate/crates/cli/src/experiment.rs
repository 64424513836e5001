//! Simulation, separation and scoring of configured experiments.
//!
//! Source images are rendered once per experiment and remixed for each
//! sweep point: the background SNR only changes the joint noise gain and a
//! target gain only rescales one image.

use std::collections::BTreeMap;

use log::{debug, info, warn};
use retm_core::metrics::{build_report, evaluate_speaker, SeparationReport};
use retm_core::retm::{MixtureAnalysis, ReTMStack};
use retm_core::room::{
    add_thermal_noise, compose_scene, derive_seed, source_level_gains, RenderedScene, RoomModel,
    SceneConfig, SourceRole,
};
use retm_core::signal::AudioBuffer;
use retm_core::stimuli;
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, SignalSpec};
use crate::error::AppResult;
use crate::wav::read_source;

/// Dry source signals covering the training and mixture segments.
pub fn load_signals(exp: &Experiment) -> AppResult<BTreeMap<String, AudioBuffer>> {
    let fs = exp.sample_rate_hz();
    let len = exp.training_len() + exp.mixture_len();
    let mut out = BTreeMap::new();
    for (id, spec) in &exp.signals {
        let buf = match spec {
            SignalSpec::Synth(kind) => stimuli::generate(
                kind,
                len as f64 / fs as f64,
                fs,
                derive_seed(exp.seed(), &format!("signal:{id}"), 0),
            )?,
            SignalSpec::Wav(path) => read_source(path, fs, len)?,
        };
        out.insert(id.clone(), buf);
    }
    Ok(out)
}

/// Unit-gain source images of both segments.
pub struct PreparedScene {
    pub scene: SceneConfig,
    /// Per source, every microphone, mixture segment.
    pub mix_images: Vec<AudioBuffer>,
    /// Per speech source, training segment; `None` for noise sources.
    speech_train: Vec<Option<AudioBuffer>>,
    /// Level-weighted sum of the noise sources over the training segment.
    noise_train: AudioBuffer,
}

impl PreparedScene {
    pub fn build(exp: &Experiment, signals: &BTreeMap<String, AudioBuffer>) -> AppResult<Self> {
        let scene = exp.scene.clone();
        let start = std::time::Instant::now();
        let model = RoomModel::new(&scene)?;
        info!(
            "{} impulse responses of {} taps in {:.1} s",
            scene.sources.len() * scene.microphones.len(),
            model.rir_len(),
            start.elapsed().as_secs_f64()
        );
        let dry = model.dry_signals(signals)?;
        let (t1, t2) = (exp.training_len(), exp.mixture_len());
        let levels = source_level_gains(&scene);
        let mut mix_images = Vec::with_capacity(dry.len());
        let mut speech_train = Vec::with_capacity(dry.len());
        let mut noise_train = AudioBuffer::zeros(scene.microphones.len(), t1, scene.sample_rate_hz);
        for (s, signal) in dry.iter().enumerate() {
            mix_images.push(model.source_image(s, signal, t1..t1 + t2));
            let train = model.source_image(s, signal, 0..t1);
            match scene.sources[s].role {
                SourceRole::Speech => speech_train.push(Some(train)),
                SourceRole::Noise => {
                    noise_train.add_scaled(&train, levels[s])?;
                    speech_train.push(None);
                }
            }
        }
        info!("scene rendered in {:.1} s", start.elapsed().as_secs_f64());
        Ok(Self {
            scene,
            mix_images,
            speech_train,
            noise_train,
        })
    }

    /// Mixture segment at background SNR `snr_db`.
    pub fn render_mixture(&self, snr_db: f64, extra_gains: Option<&[f64]>) -> AppResult<RenderedScene> {
        let mut scene = self.scene.clone();
        scene.background_snr_db = snr_db;
        Ok(compose_scene(
            &scene,
            &self.mix_images,
            extra_gains,
            derive_seed(scene.seed, "thermal-mixture", 0),
        )?)
    }

    /// Training recording for the speech source `target`: every other
    /// source active, noise at `noise_gain`, plus sensor noise.
    pub fn training(&self, target: usize, noise_gain: f64) -> AppResult<AudioBuffer> {
        let levels = source_level_gains(&self.scene);
        let mut out = self.noise_train.clone();
        out.scale(noise_gain);
        for (s, img) in self.speech_train.iter().enumerate() {
            if let Some(img) = img {
                if s != target {
                    out.add_scaled(img, levels[s])?;
                }
            }
        }
        Ok(add_thermal_noise(
            &out,
            self.scene.thermal_snr_db,
            derive_seed(self.scene.seed, "thermal-training", target as u64),
        ))
    }
}

/// Coordinates of one sweep point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub snr_db: f64,
    pub q_a: usize,
    pub target_gain_db: f64,
}

/// Cartesian product of the configured axes; empty axes use the scene and
/// group defaults.
pub fn sweep_points(exp: &Experiment) -> Vec<SweepPoint> {
    let axes = &exp.config.sweep;
    let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let snrs = or(&axes.snr_db, exp.scene.background_snr_db);
    let gains = or(&axes.target_gain_db, 0.0);
    let qas = if axes.q_a.is_empty() {
        vec![exp.config.groups.q_a()]
    } else {
        axes.q_a.clone()
    };
    let mut out = Vec::new();
    for &snr_db in &snrs {
        for &q_a in &qas {
            for &target_gain_db in &gains {
                out.push(SweepPoint {
                    snr_db,
                    q_a,
                    target_gain_db,
                });
            }
        }
    }
    out
}

/// Report of one sweep point with its nominal coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointReport {
    pub point: SweepPoint,
    pub report: SeparationReport,
}

pub struct PointOutcome {
    pub report: PointReport,
    /// One mono estimate per speech source.
    pub estimates: Vec<AudioBuffer>,
    pub retms: Vec<ReTMStack>,
}

/// Separates and scores every speaker at one sweep point.
pub fn run_point(exp: &Experiment, prepared: &PreparedScene, point: SweepPoint) -> AppResult<PointOutcome> {
    let groups = exp.groups_for(point.q_a);
    let params = exp.config.stft;
    let channel = exp.config.eval_channel;
    let speech = prepared.scene.speech_sources();
    let undesired = prepared.scene.sources.len() - 1;
    if groups.q_b() < undesired {
        warn!(
            "Q_B = {} is below the {undesired} undesired sources per target; cancellation will be partial",
            groups.q_b()
        );
    }
    let base = prepared.render_mixture(point.snr_db, None)?;
    let shared = if point.target_gain_db == 0.0 {
        Some(MixtureAnalysis::new(&base.mixture, &groups, &params)?)
    } else {
        None
    };
    let boost = 10f64.powf(point.target_gain_db / 20.0);

    let mut speakers = Vec::with_capacity(speech.len());
    let mut estimates = Vec::with_capacity(speech.len());
    let mut retms = Vec::with_capacity(speech.len());
    for (k, &source) in speech.iter().enumerate() {
        let boosted;
        let (rendered, own_analysis) = match &shared {
            Some(_) => (&base, None),
            None => {
                let mut extra = vec![1.0; prepared.scene.sources.len()];
                extra[source] = boost;
                boosted = prepared.render_mixture(point.snr_db, Some(&extra))?;
                let a = MixtureAnalysis::new(&boosted.mixture, &groups, &params)?;
                (&boosted, Some(a))
            }
        };
        let analysis = shared.as_ref().or(own_analysis.as_ref()).expect("one analysis exists");
        let training = prepared.training(source, base.noise_gain)?;
        let sep = analysis.separate(&training, exp.config.rcond)?;
        drop(training);
        let estimate = sep.channels.select_channels(&[channel])?;
        let row = evaluate_speaker(rendered, &estimate, &groups, channel, exp.max_lag(), k)?;
        debug!(
            "speaker {k}: SIR {:.2} -> {:.2} dB, {} fallback bins",
            row.unprocessed_sir_db,
            row.output_sir_db,
            sep.retm.fallback_bins()
        );
        speakers.push(row);
        estimates.push(estimate);
        retms.push(sep.retm.with_target(k));
    }
    let report = build_report(&base, &groups, channel, groups.group_a[channel], speakers);
    Ok(PointOutcome {
        report: PointReport { point, report },
        estimates,
        retms,
    })
}
