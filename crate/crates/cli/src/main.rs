use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plume_cli::commands::{self, resolve, EvalMode};
use plume_cli::{init_workers, CliError, Result, RunConfig};
use plume_core::geo::GeoPoint;
use plume_core::time::Hour;

const EXIT_CODES: &str = "Exit codes:
  0  success
  1  unexpected internal error
  2  configuration error (unknown key, invalid value)
  3  I/O or data-format error
  4  no patches could be built
  5  training diverged (non-finite loss or gradient)
  6  checkpoint or patch layout fingerprint mismatch
  7  data do not cover the requested forecast window";

#[derive(Parser)]
#[command(name = "plume", version, about = "Multi-resolution air-quality forecasting", after_help = EXIT_CODES)]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration value, e.g. `--set train.lr=0.0005`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Worker threads for patch building and evaluation; 1 gives the
    /// deterministic single-worker mode.
    #[arg(long, env = "PLUME_WORKERS", global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic region and write its dataset.
    Synth {
        /// Output dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build train and eval patch archives from a dataset.
    Patches {
        /// Dataset directory.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory for the archives and split manifest.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the model on the train archive.
    Train {
        /// Patch directory written by `patches`.
        #[arg(long)]
        patches: Option<PathBuf>,
        /// Output directory for checkpoints and train_log.csv.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint against the closest-measurement benchmark.
    Eval(EvalArgs),
    /// Forecast 24 hours at every resolution around a point.
    Forecast(ForecastArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Patch directory written by `patches`.
    #[arg(long)]
    patches: Option<PathBuf>,
    /// Archive inside the patch directory.
    #[arg(long, default_value = commands::EVAL_DIR)]
    split: String,
    /// Output directory for eval_report.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace the engine by the station readings (sanity check: engine MSLE 0).
    #[arg(long)]
    perfect: bool,
}

#[derive(Args)]
struct ForecastArgs {
    /// Checkpoint directory.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Latitude of the forecast center.
    #[arg(long, allow_hyphen_values = true)]
    lat: f64,
    /// Longitude of the forecast center.
    #[arg(long, allow_hyphen_values = true)]
    lon: f64,
    /// Last observed hour, e.g. 2021-01-20T06:00Z.
    #[arg(long)]
    t0: String,
    /// Output directory for grids, rasters and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.sets)?;
    init_workers(cli.workers)?;
    let p = &cfg.paths;
    match cli.command {
        Command::Synth { out } => {
            commands::cmd_synth(&cfg, &resolve(out, &p.data, "output")?)?;
        }
        Command::Patches { data, out } => {
            commands::cmd_patches(&cfg, &resolve(data, &p.data, "data")?, &resolve(out, &p.patches, "output")?)?;
        }
        Command::Train { patches, out } => {
            commands::cmd_train(
                &cfg,
                &resolve(patches, &p.patches, "patches")?,
                &resolve(out, &p.out, "output")?,
            )?;
        }
        Command::Eval(a) => {
            let checkpoint = match (a.checkpoint, &p.checkpoint, &p.out) {
                (Some(c), _, _) => c,
                (None, Some(c), _) => c.clone(),
                (None, None, Some(o)) => o.join(commands::BEST_DIR),
                _ => return Err(CliError::Config("no checkpoint path given (flag or [paths] section)".into())),
            };
            let mode = if a.perfect { EvalMode::Perfect } else { EvalMode::Checkpoint };
            commands::cmd_eval(
                &cfg,
                &checkpoint,
                &resolve(a.patches, &p.patches, "patches")?,
                &a.split,
                &resolve(a.out, &p.out, "output")?,
                mode,
            )?;
        }
        Command::Forecast(a) => {
            let center = GeoPoint::new(a.lat, a.lon).map_err(|e| CliError::Config(e.to_string()))?;
            let t0: Hour = a.t0.parse().map_err(|e: plume_core::Error| CliError::Config(e.to_string()))?;
            let checkpoint = match (a.checkpoint, &p.checkpoint, &p.out) {
                (Some(c), _, _) => c,
                (None, Some(c), _) => c.clone(),
                (None, None, Some(o)) => o.join(commands::BEST_DIR),
                _ => return Err(CliError::Config("no checkpoint path given (flag or [paths] section)".into())),
            };
            commands::cmd_forecast(
                &cfg,
                &checkpoint,
                &resolve(a.data, &p.data, "data")?,
                center,
                t0,
                &resolve(a.out, &p.out, "output")?,
            )?;
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("plume: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
