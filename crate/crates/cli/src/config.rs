//! Experiment configuration files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use retm_core::retm::{GroupAssignment, SegmentSpec};
use retm_core::room::SceneConfig;
use retm_core::signal::StftParams;
use retm_core::stimuli::GENERATORS;
use serde::{Deserialize, Serialize};

use crate::error::AppError;

/// Prefix of signal manifest entries that name a built-in generator.
pub const SYNTH_PREFIX: &str = "synth:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneSource {
    Inline(SceneConfig),
    Path(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentMode {
    /// Training recordings are rendered with the target muted.
    Synthesized,
    /// One recording with known per-target intervals, in speech-source order.
    Explicit {
        recording: PathBuf,
        targets: Vec<SegmentSpec>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    #[serde(default)]
    pub snr_db: Vec<f64>,
    #[serde(default)]
    pub q_a: Vec<usize>,
    #[serde(default)]
    pub target_gain_db: Vec<f64>,
}

impl SweepAxes {
    pub fn is_empty(&self) -> bool {
        self.snr_db.is_empty() && self.q_a.is_empty() && self.target_gain_db.is_empty()
    }
}

fn default_segments() -> SegmentMode {
    SegmentMode::Synthesized
}
fn default_training_s() -> f64 {
    60.0
}
fn default_mixture_s() -> f64 {
    20.0
}
fn default_rcond() -> f64 {
    retm_core::numerics::DEFAULT_RCOND
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_floor_db() -> f64 {
    -120.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scene: SceneSource,
    /// `signal_id` to WAV path or `synth:<generator>`.
    pub signals: BTreeMap<String, String>,
    pub groups: GroupAssignment,
    #[serde(default)]
    pub stft: StftParams,
    #[serde(default = "default_segments")]
    pub segments: SegmentMode,
    #[serde(default = "default_training_s")]
    pub training_s: f64,
    #[serde(default = "default_mixture_s")]
    pub mixture_s: f64,
    #[serde(default)]
    pub sweep: SweepAxes,
    #[serde(default = "default_rcond")]
    pub rcond: f64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides the scene seed when set.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Group-A channel that is written out and scored.
    #[serde(default)]
    pub eval_channel: usize,
    #[serde(default = "default_floor_db")]
    pub spectrogram_floor_db: f64,
}

/// Where a source signal comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum SignalSpec {
    Synth(String),
    Wav(PathBuf),
}

impl SignalSpec {
    pub fn parse(value: &str, base: &Path) -> Self {
        match value.strip_prefix(SYNTH_PREFIX) {
            Some(kind) => SignalSpec::Synth(kind.to_string()),
            None => SignalSpec::Wav(resolve(base, Path::new(value))),
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// A configuration with its scene resolved and file paths made absolute.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub scene: SceneConfig,
    pub signals: BTreeMap<String, SignalSpec>,
    pub base_dir: PathBuf,
}

fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T, AppError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let at = if path == "." { String::new() } else { format!(" at {path}") };
        AppError::Config(format!("{}{at}: {inner}", origin.display()))
    })
}

fn read(path: &Path) -> Result<String, AppError> {
    fs::read_to_string(path)
        .map_err(|e| AppError::Config(format!("cannot read {}: {e}", path.display())))
}

/// Loads a scene file.
pub fn load_scene(path: &Path) -> Result<SceneConfig, AppError> {
    let scene: SceneConfig = parse_json(&read(path)?, path)?;
    scene
        .validate()
        .map_err(|e| AppError::Config(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

impl Experiment {
    pub fn load(path: &Path) -> Result<Self, AppError> {
        let config: ExperimentConfig = parse_json(&read(path)?, path)?;
        let base_dir = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        Self::from_config(config, &base_dir)
    }

    /// Resolves relative paths against `base_dir` and validates.
    pub fn from_config(mut config: ExperimentConfig, base_dir: &Path) -> Result<Self, AppError> {
        let scene = match &config.scene {
            SceneSource::Inline(scene) => {
                scene
                    .validate()
                    .map_err(|e| AppError::Config(format!("scene: {e}")))?;
                scene.clone()
            }
            SceneSource::Path(p) => load_scene(&resolve(base_dir, p))?,
        };
        config.output_dir = resolve(base_dir, &config.output_dir);
        if let SegmentMode::Explicit { recording, .. } = &mut config.segments {
            *recording = resolve(base_dir, recording);
        }
        let signals = config
            .signals
            .iter()
            .map(|(id, v)| (id.clone(), SignalSpec::parse(v, base_dir)))
            .collect();
        let exp = Self {
            config,
            scene,
            signals,
            base_dir: base_dir.to_path_buf(),
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.config.seed = Some(s);
        }
        if let Some(s) = self.config.seed {
            self.scene.seed = s;
        }
        self
    }

    fn validate(&self) -> Result<(), AppError> {
        let c = &self.config;
        let err = |m: String| Err(AppError::Config(m));
        let mics = self.scene.microphones.len();
        c.groups
            .validate(mics)
            .map_err(|e| AppError::Config(format!("groups: {e}")))?;
        c.stft
            .validate()
            .map_err(|e| AppError::Config(format!("stft: {e}")))?;
        if c.eval_channel >= c.groups.q_a() {
            return err(format!(
                "eval_channel: {} out of range for {} group-A microphones",
                c.eval_channel,
                c.groups.q_a()
            ));
        }
        if !(c.rcond > 0.0 && c.rcond < 1.0) {
            return err(format!("rcond: {} outside (0, 1)", c.rcond));
        }
        let window_s = c.stft.window_len as f64 / self.scene.sample_rate_hz as f64;
        if !(c.training_s >= window_s && c.training_s.is_finite()) {
            return err(format!("training_s: {} s is shorter than one STFT window", c.training_s));
        }
        if !(c.mixture_s >= window_s && c.mixture_s.is_finite()) {
            return err(format!("mixture_s: {} s is shorter than one STFT window", c.mixture_s));
        }
        for (i, s) in self.scene.sources.iter().enumerate() {
            if !self.signals.contains_key(&s.signal_id) {
                return err(format!(
                    "signals: no entry for {:?} used by sources[{i}]",
                    s.signal_id
                ));
            }
        }
        for (id, spec) in &self.signals {
            match spec {
                SignalSpec::Synth(kind) if !GENERATORS.contains(&kind.as_str()) => {
                    return err(format!(
                        "signals.{id}: unknown generator {kind:?}; expected one of {GENERATORS:?}"
                    ))
                }
                SignalSpec::Wav(p) if !p.is_file() => {
                    return err(format!("signals.{id}: file {} does not exist", p.display()))
                }
                _ => {}
            }
        }
        for (i, q) in c.sweep.q_a.iter().enumerate() {
            if *q == 0 || *q > c.groups.q_a() {
                return err(format!(
                    "sweep.q_a[{i}]: {q} must be between 1 and the {} configured group-A microphones",
                    c.groups.q_a()
                ));
            }
        }
        for (name, axis) in [("snr_db", &c.sweep.snr_db), ("target_gain_db", &c.sweep.target_gain_db)] {
            if let Some(i) = axis.iter().position(|v| !v.is_finite()) {
                return err(format!("sweep.{name}[{i}]: value must be finite"));
            }
        }
        if let SegmentMode::Explicit { recording, targets } = &c.segments {
            if !recording.is_file() {
                return err(format!(
                    "segments.explicit.recording: file {} does not exist",
                    recording.display()
                ));
            }
            let speakers = self.scene.speech_sources().len();
            if targets.len() != speakers {
                return err(format!(
                    "segments.explicit.targets: {} entries for {speakers} speech sources",
                    targets.len()
                ));
            }
        }
        Ok(())
    }

    pub fn seed(&self) -> u64 {
        self.scene.seed
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.scene.sample_rate_hz
    }

    /// Window length in samples used for delay alignment.
    pub fn max_lag(&self) -> usize {
        self.config.stft.window_len
    }

    pub fn training_len(&self) -> usize {
        (self.config.training_s * self.sample_rate_hz() as f64).round() as usize
    }

    pub fn mixture_len(&self) -> usize {
        (self.config.mixture_s * self.sample_rate_hz() as f64).round() as usize
    }

    /// Groups with group A cut to its first `q_a` microphones.
    pub fn groups_for(&self, q_a: usize) -> GroupAssignment {
        let g = &self.config.groups;
        GroupAssignment::new(g.group_a[..q_a].to_vec(), g.group_b.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCENE: &str = r#"{
        "room_dims": [4, 5, 3], "t60_s": 0.3,
        "sources": [
            {"position": [1, 1, 1.5], "role": "speech", "signal_id": "a"},
            {"position": [3, 4, 1.5], "role": "noise", "signal_id": "n"}
        ],
        "microphones": [[2, 2, 1], [2.5, 2, 1], [2, 3, 1]],
        "sample_rate_hz": 8000, "background_snr_db": 0, "seed": 3
    }"#;

    fn config(extra: &str) -> String {
        format!(
            r#"{{"scene": {SCENE}, "signals": {{"a": "synth:speech", "n": "synth:white"}},
                "groups": {{"group_a": [0], "group_b": [1, 2]}},
                "stft": {{"window_len": 256, "hop": 128}} {extra} }}"#
        )
    }

    fn parse(text: &str) -> Result<Experiment, AppError> {
        let c: ExperimentConfig = parse_json(text, Path::new("test.json"))?;
        Experiment::from_config(c, Path::new("/tmp"))
    }

    #[test]
    fn defaults_fill_in() {
        let e = parse(&config("")).unwrap();
        assert_eq!(e.config.training_s, 60.0);
        assert_eq!(e.config.mixture_s, 20.0);
        assert_eq!(e.config.segments, SegmentMode::Synthesized);
        assert_eq!(e.config.output_dir, PathBuf::from("/tmp/out"));
        assert_eq!(e.scene.thermal_snr_db, 60.0);
        assert_eq!(e.signals["a"], SignalSpec::Synth("speech".into()));
        assert_eq!(e.training_len(), 480000);
        let e = e.with_seed(Some(11));
        assert_eq!(e.seed(), 11);
    }

    #[test]
    fn errors_name_the_field() {
        let msg = |extra: &str| parse(&config(extra)).unwrap_err().to_string();
        assert!(msg(r#", "eval_channel": 3"#).contains("eval_channel"));
        assert!(msg(r#", "sweep": {"q_a": [2]}"#).contains("sweep.q_a[0]"));
        assert!(msg(r#", "bogus": 1"#).contains("bogus"));
        assert!(msg(r#", "rcond": 2"#).contains("rcond"));
        let bad_type = msg(r#", "sweep": {"snr_db": ["x"]}"#);
        assert!(bad_type.contains("sweep.snr_db[0]"), "{bad_type}");
        let bad_signal = config("").replace("synth:white", "synth:choir");
        assert!(parse(&bad_signal).unwrap_err().to_string().contains("signals.n"));
        let missing = config("").replace("nowhere", "").replace("synth:white", "missing.wav");
        assert!(parse(&missing).unwrap_err().to_string().contains("does not exist"));
        let mic = config("").replace("[2, 3, 1]", "[2, 3, 9]");
        assert!(parse(&mic).unwrap_err().to_string().contains("microphones[2]"));
    }

    #[test]
    fn explicit_segments_parse() {
        let text = config(
            r#", "segments": {"explicit": {"recording": "rec.wav", "targets": [{"t1": [0, 1], "t2": [1, 2]}]}}"#,
        );
        let c: ExperimentConfig = parse_json(&text, Path::new("x")).unwrap();
        match c.segments {
            SegmentMode::Explicit { targets, .. } => assert_eq!(targets[0].t2, [1.0, 2.0]),
            _ => panic!("expected explicit segments"),
        }
    }

    #[test]
    fn groups_for_truncates_group_a() {
        let text = config("").replace(r#""group_a": [0]"#, r#""group_a": [0, 2]"#).replace(
            r#""group_b": [1, 2]"#,
            r#""group_b": [1]"#,
        );
        let e = parse(&text).unwrap();
        assert_eq!(e.groups_for(1), GroupAssignment::new(vec![0], vec![1]));
    }
}
