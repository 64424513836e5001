//! The five subcommands. Each works on an output directory with a fixed
//! layout so that later steps can pick up what earlier ones wrote.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use log::{info, warn};
use retm_core::metrics::{evaluate_scenario, export_spectrogram, SeparationReport, SpectrogramFormat};
use retm_core::retm::{MixtureAnalysis, SegmentSpec};
use retm_core::room::{derive_seed, RenderedScene, SourceRole};
use retm_core::signal::{stft, AudioBuffer, StftParams};
use serde::{Deserialize, Serialize};

use crate::config::{Experiment, SegmentMode};
use crate::error::{AppError, AppResult};
use crate::experiment::{load_signals, run_point, sweep_points, PointReport, PreparedScene, SweepPoint};
use crate::retm_io::{log_condition_histogram, write_retm};
use crate::wav::{read_wav, write_wav};

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub rcond: Option<f64>,
    pub channel: Option<usize>,
}

/// Loads a configuration and applies command-line overrides.
pub fn load_experiment(path: &Path, ov: &Overrides) -> AppResult<Experiment> {
    let mut exp = Experiment::load(path)?.with_seed(ov.seed);
    if let Some(out) = &ov.out {
        exp.config.output_dir = out.clone();
    }
    if let Some(rcond) = ov.rcond {
        if !(rcond > 0.0 && rcond < 1.0) {
            return Err(AppError::Config(format!("--rcond: {rcond} outside (0, 1)")));
        }
        exp.config.rcond = rcond;
    }
    if let Some(channel) = ov.channel {
        if channel >= exp.config.groups.q_a() {
            return Err(AppError::Config(format!(
                "--channel: {channel} out of range for {} group-A microphones",
                exp.config.groups.q_a()
            )));
        }
        exp.config.eval_channel = channel;
    }
    Ok(exp)
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn mixture(&self) -> PathBuf {
        self.root.join("mixture.wav")
    }
    pub fn image(&self, source: usize, signal_id: &str) -> PathBuf {
        self.root.join("images").join(format!("source-{source}-{signal_id}.wav"))
    }
    pub fn training(&self, target: usize) -> PathBuf {
        self.root.join("training").join(format!("target-{target}.wav"))
    }
    pub fn separated(&self, target: usize) -> PathBuf {
        self.root.join("separated").join(format!("speaker-{target}.wav"))
    }
    pub fn retm(&self, target: usize) -> PathBuf {
        self.root.join("retm").join(format!("target-{target}.retm"))
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn point_dir(&self, index: usize) -> PathBuf {
        self.sweep_dir().join(format!("point-{index:03}"))
    }
    pub fn summary(&self) -> PathBuf {
        self.sweep_dir().join("summary.csv")
    }
    pub fn resume_marker(&self) -> PathBuf {
        self.sweep_dir().join("RESUME")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::io(path, e))?;
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSource {
    pub index: usize,
    pub signal_id: String,
    pub role: SourceRole,
    /// Overall factor applied to the dry signal.
    pub gain: f64,
    pub image: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestTarget {
    pub target: usize,
    pub source_index: usize,
    pub training: PathBuf,
    pub thermal_seed: u64,
}

/// Record of a simulation run. Paths are relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub sample_rate_hz: u32,
    pub microphones: usize,
    pub background_snr_db: f64,
    pub thermal_snr_db: f64,
    pub training_s: f64,
    pub mixture_s: f64,
    pub noise_gain: f64,
    pub mixture: PathBuf,
    pub mixture_thermal_seed: u64,
    pub signal_seeds: BTreeMap<String, u64>,
    pub sources: Vec<ManifestSource>,
    pub targets: Vec<ManifestTarget>,
}

fn relative(layout: &Layout, path: &Path) -> PathBuf {
    path.strip_prefix(&layout.root).unwrap_or(path).to_path_buf()
}

/// Renders the configured scene: the mixture, every source image and one
/// training recording per speech source with that source muted.
pub fn simulate(exp: &Experiment) -> AppResult<Manifest> {
    let layout = Layout::new(&exp.config.output_dir);
    let signals = load_signals(exp)?;
    let prepared = PreparedScene::build(exp, &signals)?;
    let rendered = prepared.render_mixture(exp.scene.background_snr_db, None)?;

    write_wav(&layout.mixture(), &rendered.mixture)?;
    let mut sources = Vec::with_capacity(exp.scene.sources.len());
    for (i, (src, img)) in exp.scene.sources.iter().zip(&rendered.per_source_images).enumerate() {
        let path = layout.image(i, &src.signal_id);
        write_wav(&path, img)?;
        sources.push(ManifestSource {
            index: i,
            signal_id: src.signal_id.clone(),
            role: src.role,
            gain: rendered.gains[i],
            image: relative(&layout, &path),
        });
    }
    let mut targets = Vec::new();
    for (k, &s) in exp.scene.speech_sources().iter().enumerate() {
        let path = layout.training(k);
        write_wav(&path, &prepared.training(s, rendered.noise_gain)?)?;
        targets.push(ManifestTarget {
            target: k,
            source_index: s,
            training: relative(&layout, &path),
            thermal_seed: derive_seed(exp.seed(), "thermal-training", s as u64),
        });
    }
    let signal_seeds = exp
        .signals
        .keys()
        .map(|id| (id.clone(), derive_seed(exp.seed(), &format!("signal:{id}"), 0)))
        .collect();
    let manifest = Manifest {
        seed: exp.seed(),
        sample_rate_hz: exp.sample_rate_hz(),
        microphones: exp.scene.microphones.len(),
        background_snr_db: exp.scene.background_snr_db,
        thermal_snr_db: exp.scene.thermal_snr_db,
        training_s: exp.config.training_s,
        mixture_s: exp.config.mixture_s,
        noise_gain: rendered.noise_gain,
        mixture: relative(&layout, &layout.mixture()),
        mixture_thermal_seed: derive_seed(exp.seed(), "thermal-mixture", 0),
        signal_seeds,
        sources,
        targets,
    };
    write_json(&layout.manifest(), &manifest)?;
    info!(
        "wrote 1 mixture, {} images and {} training recordings to {}",
        manifest.sources.len(),
        manifest.targets.len(),
        layout.root.display()
    );
    Ok(manifest)
}

fn read_checked(path: &Path, exp: &Experiment, what: &str) -> AppResult<AudioBuffer> {
    if !path.is_file() {
        return Err(AppError::io(path, format!("{what} not found")));
    }
    let buf = read_wav(path)?;
    if buf.sample_rate_hz() != exp.sample_rate_hz() {
        return Err(AppError::io(
            path,
            format!(
                "sample rate {} Hz differs from the configured {} Hz",
                buf.sample_rate_hz(),
                exp.sample_rate_hz()
            ),
        ));
    }
    Ok(buf)
}

fn slice_segment(buf: &AudioBuffer, interval: [f64; 2], what: &str, path: &Path) -> AppResult<AudioBuffer> {
    let range = SegmentSpec::sample_range(interval, buf.sample_rate_hz());
    if range.end > buf.len() + 1 {
        return Err(AppError::io(path, format!("{what} runs past the end of the recording")));
    }
    Ok(buf.slice(range.start..range.end.min(buf.len())))
}

/// Separates every speech source and writes one mono estimate per target
/// together with its ReTM. Returns the number of targets processed.
pub fn separate(exp: &Experiment) -> AppResult<usize> {
    let layout = Layout::new(&exp.config.output_dir);
    let groups = &exp.config.groups;
    let params = exp.config.stft;
    let channel = exp.config.eval_channel;
    let undesired = exp.scene.sources.len().saturating_sub(1);
    if groups.q_b() < undesired {
        warn!(
            "Q_B = {} is below the {undesired} undesired sources per target; cancellation will be partial",
            groups.q_b()
        );
    }
    let targets = exp.scene.speech_sources().len();
    let write = |k: usize, sep: retm_core::retm::SpeakerSeparation| -> AppResult<()> {
        write_wav(&layout.separated(k), &sep.channels.select_channels(&[channel])?)?;
        let retm = sep.retm.with_target(k);
        log_condition_histogram(&retm);
        write_retm(&layout.retm(k), &retm)
    };
    match &exp.config.segments {
        SegmentMode::Synthesized => {
            let mixture = read_checked(&layout.mixture(), exp, "mixture recording")?;
            let analysis = MixtureAnalysis::new(&mixture, groups, &params)?;
            for k in 0..targets {
                let path = layout.training(k);
                if !path.is_file() {
                    return Err(AppError::io(
                        &path,
                        format!("training recording for target {k} not found"),
                    ));
                }
                let training = read_checked(&path, exp, "training recording")?;
                write(k, analysis.separate(&training, exp.config.rcond)?)?;
            }
        }
        SegmentMode::Explicit { recording, targets: segments } => {
            let full = read_checked(recording, exp, "recording")?;
            let window_s = params.window_len as f64 / exp.sample_rate_hz() as f64;
            for (k, seg) in segments.iter().enumerate() {
                seg.validate(full.duration_s(), window_s)
                    .map_err(|e| AppError::Config(format!("segments.explicit.targets[{k}]: {e}")))?;
                let training = slice_segment(&full, seg.t1, "t1", recording)?;
                let mixture = slice_segment(&full, seg.t2, "t2", recording)?;
                let sep = MixtureAnalysis::new(&mixture, groups, &params)?
                    .separate(&training, exp.config.rcond)?;
                write(k, sep)?;
            }
        }
    }
    info!("separated {targets} targets into {}", layout.root.display());
    Ok(targets)
}

/// Per-speaker table in plain text.
pub fn format_report(report: &SeparationReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "Q_A = {}, Q_B = {}, microphone {}, SNR {:.2} dB",
        report.q_a, report.q_b, report.eval_microphone, report.snr_db
    );
    let _ = writeln!(
        s,
        "{:<8} {:>7} {:>12} {:>12} {:>12} {:>12} {:>6}",
        "speaker", "source", "SIR in", "SIR out", "SDR in", "SDR out", "lag"
    );
    for (k, r) in report.speakers.iter().enumerate() {
        let _ = writeln!(
            s,
            "{:<8} {:>7} {:>12.2} {:>12.2} {:>12} {:>12.2} {:>6}",
            k + 1,
            r.source_index,
            r.unprocessed_sir_db,
            r.output_sir_db,
            r.unprocessed_sdr_note,
            r.output_sdr_db,
            r.alignment_lag
        );
    }
    let _ = writeln!(
        s,
        "mean     {:>7} {:>12.2} {:>12.2} {:>12} {:>12.2}",
        "",
        report.mean_unprocessed_sir_db(),
        report.mean_output_sir_db(),
        "",
        report.mean_output_sdr_db()
    );
    s
}

/// Scores the separated signals against the simulated images and writes
/// `report.json`.
pub fn evaluate(exp: &Experiment) -> AppResult<SeparationReport> {
    let layout = Layout::new(&exp.config.output_dir);
    let manifest: Manifest = read_json(&layout.manifest())?;
    let mixture = read_checked(&layout.root.join(&manifest.mixture), exp, "mixture recording")?;
    let images = manifest
        .sources
        .iter()
        .map(|s| read_checked(&layout.root.join(&s.image), exp, "source image"))
        .collect::<AppResult<Vec<_>>>()?;
    let estimates = (0..manifest.targets.len())
        .map(|k| read_checked(&layout.separated(k), exp, "separated signal"))
        .collect::<AppResult<Vec<_>>>()?;
    let rendered = RenderedScene {
        mixture,
        per_source_images: images,
        gains: manifest.sources.iter().map(|s| s.gain).collect(),
        roles: manifest.sources.iter().map(|s| s.role).collect(),
        noise_gain: manifest.noise_gain,
    };
    let report = evaluate_scenario(
        &rendered,
        &estimates,
        &exp.config.groups,
        exp.config.eval_channel,
        exp.max_lag(),
    )?;
    write_json(&layout.report(), &report)?;
    Ok(report)
}

/// Header of the sweep summary, one column per axis and metric.
fn summary_header(speakers: usize) -> String {
    let mut cols: Vec<String> = ["point", "snr_db", "q_a", "target_gain_db", "measured_snr_db"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for k in 1..=speakers {
        for m in ["sir_in_db", "sir_out_db", "sdr_out_db"] {
            cols.push(format!("spk{k}_{m}"));
        }
    }
    cols.extend(["mean_sir_out_db".into(), "mean_sdr_out_db".into()]);
    format!("# {}", cols.join(","))
}

fn summary_row(index: usize, p: &PointReport) -> String {
    let r = &p.report;
    let mut cols = vec![
        index.to_string(),
        format!("{:.2}", p.point.snr_db),
        p.point.q_a.to_string(),
        format!("{:.2}", p.point.target_gain_db),
        format!("{:.4}", r.snr_db),
    ];
    for s in &r.speakers {
        for v in [s.unprocessed_sir_db, s.output_sir_db, s.output_sdr_db] {
            cols.push(format!("{v:.4}"));
        }
    }
    cols.push(format!("{:.4}", r.mean_output_sir_db()));
    cols.push(format!("{:.4}", r.mean_output_sdr_db()));
    cols.join(",")
}

/// CSV text of a sweep summary.
pub fn summary_csv(points: &[PointReport]) -> String {
    let speakers = points.first().map_or(0, |p| p.report.speakers.len());
    let mut out = summary_header(speakers);
    out.push('\n');
    for (i, p) in points.iter().enumerate() {
        out.push_str(&summary_row(i, p));
        out.push('\n');
    }
    out
}

const DONE: &str = "done";
const FINGERPRINT: &str = "config.json";

fn completed_point(layout: &Layout, index: usize, point: &SweepPoint) -> Option<PointReport> {
    let dir = layout.point_dir(index);
    if !dir.join(DONE).is_file() {
        return None;
    }
    let report: PointReport = read_json(&dir.join("report.json")).ok()?;
    (report.point == *point).then_some(report)
}

fn store_point(layout: &Layout, index: usize, report: &PointReport) -> AppResult<()> {
    let dir = layout.point_dir(index);
    write_json(&dir.join("report.json"), report)?;
    let done = dir.join(DONE);
    fs::write(&done, b"").map_err(|e| AppError::io(&done, e))
}

/// Drops finished points left by a run with a different configuration.
fn check_fingerprint(layout: &Layout, exp: &Experiment) -> AppResult<()> {
    let path = layout.sweep_dir().join(FINGERPRINT);
    let current = serde_json::json!({ "config": exp.config, "scene": exp.scene });
    if let Ok(previous) = read_json::<serde_json::Value>(&path) {
        if previous != current {
            warn!("configuration changed since the last sweep; recomputing every point");
            for entry in fs::read_dir(layout.sweep_dir()).map_err(|e| AppError::io(&layout.root, e))? {
                let p = entry.map_err(|e| AppError::io(&layout.root, e))?.path();
                let is_point = p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("point-"));
                if is_point && p.is_dir() {
                    fs::remove_dir_all(&p).map_err(|e| AppError::io(&p, e))?;
                }
            }
        }
    }
    write_json(&path, &current)
}

/// Runs the cartesian product of the sweep axes on `jobs` workers. Points
/// already finished by an interrupted run are reused.
pub fn sweep(exp: &Experiment, jobs: usize) -> AppResult<Vec<PointReport>> {
    if exp.config.sweep.is_empty() {
        return Err(AppError::Config("sweep: at least one axis must be non-empty".into()));
    }
    if exp.config.segments != SegmentMode::Synthesized {
        return Err(AppError::Config(
            "segments: sweeps need synthesized training segments".into(),
        ));
    }
    let layout = Layout::new(&exp.config.output_dir);
    fs::create_dir_all(layout.sweep_dir()).map_err(|e| AppError::io(&layout.sweep_dir(), e))?;
    check_fingerprint(&layout, exp)?;

    let points = sweep_points(exp);
    let mut results: Vec<Option<PointReport>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| completed_point(&layout, i, p))
        .collect();
    let pending: Vec<usize> = (0..points.len()).filter(|&i| results[i].is_none()).collect();
    info!(
        "{} sweep points, {} already done, {} to run",
        points.len(),
        points.len() - pending.len(),
        pending.len()
    );

    if !pending.is_empty() {
        let signals = load_signals(exp)?;
        let prepared = PreparedScene::build(exp, &signals)?;
        drop(signals);
        let next = AtomicUsize::new(0);
        let failed = AtomicBool::new(false);
        let first_error = Mutex::new(None);
        let finished = Mutex::new(Vec::new());
        let workers = jobs.clamp(1, pending.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    if failed.load(Ordering::SeqCst) {
                        break;
                    }
                    let Some(&index) = pending.get(next.fetch_add(1, Ordering::SeqCst)) else {
                        break;
                    };
                    let point = points[index];
                    let outcome = run_point(exp, &prepared, point)
                        .and_then(|o| store_point(&layout, index, &o.report).map(|_| o.report));
                    match outcome {
                        Ok(report) => {
                            info!(
                                "point {index}: SNR {} dB, Q_A {}, gain {} dB, mean SIR {:.2} dB",
                                point.snr_db,
                                point.q_a,
                                point.target_gain_db,
                                report.report.mean_output_sir_db()
                            );
                            finished.lock().expect("no worker panics while holding the lock").push((index, report));
                        }
                        Err(e) => {
                            failed.store(true, Ordering::SeqCst);
                            first_error
                                .lock()
                                .expect("no worker panics while holding the lock")
                                .get_or_insert((index, e));
                        }
                    }
                });
            }
        });
        for (index, report) in finished.into_inner().expect("workers have joined") {
            results[index] = Some(report);
        }
        if let Some((index, err)) = first_error.into_inner().expect("workers have joined") {
            let done = results.iter().filter(|r| r.is_some()).count();
            let marker = layout.resume_marker();
            let note = format!(
                "point {index} failed: {err}\n{done} of {} points are complete; rerun the sweep to resume\n",
                points.len()
            );
            fs::write(&marker, note).map_err(|e| AppError::io(&marker, e))?;
            return Err(err);
        }
    }

    let reports: Vec<PointReport> = results.into_iter().map(|r| r.expect("every point ran")).collect();
    let summary = layout.summary();
    fs::write(&summary, summary_csv(&reports)).map_err(|e| AppError::io(&summary, e))?;
    let marker = layout.resume_marker();
    if marker.exists() {
        fs::remove_file(&marker).map_err(|e| AppError::io(&marker, e))?;
    }
    Ok(reports)
}

/// Writes the magnitude spectrogram of one channel of a WAV file and
/// returns the path written.
pub fn spectrogram(
    input: &Path,
    channel: usize,
    format: SpectrogramFormat,
    params: &StftParams,
    floor_db: f64,
    out_dir: &Path,
) -> AppResult<PathBuf> {
    let buf = read_wav(input)?;
    if channel >= buf.num_channels() {
        return Err(AppError::Config(format!(
            "--channel: {channel} out of range for {} channels in {}",
            buf.num_channels(),
            input.display()
        )));
    }
    let spec = stft(&buf.select_channels(&[channel])?, params)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("signal");
    let ext = match format {
        SpectrogramFormat::Csv => "csv",
        SpectrogramFormat::Png => "png",
    };
    let dir = out_dir.join("spectrograms");
    fs::create_dir_all(&dir).map_err(|e| AppError::io(&dir, e))?;
    let path = dir.join(format!("{stem}-ch{channel}.{ext}"));
    export_spectrogram(&spec, 0, &path, format, floor_db)?;
    Ok(path)
}
