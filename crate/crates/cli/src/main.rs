use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::LevelFilter;
use retm_cli::commands::{self, Overrides};
use retm_cli::error::{AppError, AppResult};
use retm_core::metrics::SpectrogramFormat;

#[derive(Parser)]
#[command(name = "retm", version, about = "Speaker separation with blind relative transfer matrices")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Random seed, overriding the configuration and scene.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Relative singular-value cutoff of the pseudoinverse.
    #[arg(long, global = true)]
    rcond: Option<f64>,

    /// Group-A channel to write and score, or the input channel of
    /// `spectrogram`.
    #[arg(long, global = true)]
    channel: Option<usize>,

    /// Worker threads for `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// More log output; repeat for more detail.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Render the mixture, source images and training recordings.
    Simulate,
    /// Estimate ReTMs and separate every target speaker.
    Separate,
    /// Score separated signals against the simulated images.
    Evaluate,
    /// Simulate, separate and score every point of the sweep axes.
    Sweep,
    /// Export the magnitude spectrogram of a WAV file.
    Spectrogram {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Png)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Png,
}

fn init_logging(verbosity: u8) {
    let level = match verbosity {
        0 => LevelFilter::Warn,
        1 => LevelFilter::Info,
        2 => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
}

fn require_config(path: &Option<PathBuf>) -> AppResult<&Path> {
    path.as_deref()
        .ok_or_else(|| AppError::Config("--config <path> is required for this command".into()))
}

fn run(cli: Cli) -> AppResult<()> {
    let overrides = Overrides {
        out: cli.out.clone(),
        seed: cli.seed,
        rcond: cli.rcond,
        channel: cli.channel,
    };
    match cli.command {
        Command::Simulate => {
            let exp = commands::load_experiment(require_config(&cli.config)?, &overrides)?;
            let manifest = commands::simulate(&exp)?;
            println!(
                "simulated {} sources and {} training recordings in {}",
                manifest.sources.len(),
                manifest.targets.len(),
                exp.config.output_dir.display()
            );
        }
        Command::Separate => {
            let exp = commands::load_experiment(require_config(&cli.config)?, &overrides)?;
            let n = commands::separate(&exp)?;
            println!("separated {n} speakers into {}", exp.config.output_dir.display());
        }
        Command::Evaluate => {
            let exp = commands::load_experiment(require_config(&cli.config)?, &overrides)?;
            let report = commands::evaluate(&exp)?;
            print!("{}", commands::format_report(&report));
        }
        Command::Sweep => {
            let exp = commands::load_experiment(require_config(&cli.config)?, &overrides)?;
            let reports = commands::sweep(&exp, cli.jobs)?;
            println!(
                "{} sweep points written to {}",
                reports.len(),
                commands::Layout::new(&exp.config.output_dir).summary().display()
            );
        }
        Command::Spectrogram { input, format } => {
            // Without a configuration the analysis uses the default STFT.
            let (params, floor_db, out_dir) = match &cli.config {
                Some(path) => {
                    let exp = commands::load_experiment(path, &Overrides { channel: None, ..overrides })?;
                    (exp.config.stft, exp.config.spectrogram_floor_db, exp.config.output_dir)
                }
                None => (Default::default(), -120.0, cli.out.clone().unwrap_or_else(|| PathBuf::from("."))),
            };
            let format = match format {
                Format::Csv => SpectrogramFormat::Csv,
                Format::Png => SpectrogramFormat::Png,
            };
            let path = commands::spectrogram(
                &input,
                cli.channel.unwrap_or(0),
                format,
                &params,
                floor_db,
                &out_dir,
            )?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
