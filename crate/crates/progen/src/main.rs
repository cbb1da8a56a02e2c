use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use progen::commands::{self, ForecastArgs, SplitName};
use progen::config::{ModeName, RunConfig};
use progen::verify::{self, Suite, VerifyOptions};
use progen::{io, CliError, Result};

#[derive(Parser)]
#[command(name = "progen", version, about = "Score-based probabilistic spatiotemporal forecasting")]
struct Cli {
    /// Override a config value, e.g. `--set train.epochs=5` (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Seed; wins over PROGEN_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, its graph and a default config.
    Synth {
        #[arg(long, default_value_t = 12)]
        nodes: usize,
        #[arg(long, default_value_t = 2016)]
        steps: usize,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Train a score model and write the best checkpoint and loss curve.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV (default: `<out stem>_loss.csv`).
        #[arg(long = "loss-curve")]
        loss_curve: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Sample a forecast ensemble for one window.
    Forecast {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeName>,
        #[arg(long = "window-index", default_value_t = 0)]
        window_index: usize,
        #[arg(long, value_enum, default_value_t = SplitName::Test)]
        split: SplitName,
        /// Adaptive trace files to replay by per-step majority vote.
        #[arg(long)]
        calibration: Vec<PathBuf>,
        /// Ensemble CSV; truth, trace and best-tracked files go next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an ensemble CSV against a truth CSV.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Report CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a numerical verification suite.
    Verify {
        #[arg(long, value_enum)]
        suite: Suite,
        /// Neighbor coupling for the lyapunov suite.
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli, path: &std::path::Path, extra: Vec<String>) -> Result<RunConfig> {
    let mut overrides = cli.overrides.clone();
    overrides.extend(extra);
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    let cfg = RunConfig::load(Some(path), &overrides)?;
    println!("config digest: {}", cfg.digest());
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Synth { nodes, steps, out_dir } => {
            let seed = match cli.seed {
                Some(s) => s,
                None => match std::env::var(progen::config::SEED_ENV) {
                    Ok(v) => v
                        .trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("PROGEN_SEED={v:?} is not an integer")))?,
                    Err(_) => 0,
                },
            };
            commands::synth(*nodes, *steps, seed, out_dir)?;
            println!("wrote {}", out_dir.display());
        }
        Command::Train {
            config,
            out,
            loss_curve,
            quiet,
        } => {
            let cfg = load_config(&cli, config, Vec::new())?;
            let loss = loss_curve.clone().unwrap_or_else(|| io::sibling(out, "_loss.csv"));
            let s = commands::train_cmd(&cfg, out, &loss, !quiet)?;
            println!(
                "trained {} parameters; best epoch {} of {}",
                s.param_count,
                s.best_epoch,
                s.curve.len() - 1
            );
        }
        Command::Forecast {
            config,
            checkpoint,
            mode,
            window_index,
            split,
            calibration,
            out,
        } => {
            let mut extra = Vec::new();
            if let Some(m) = mode {
                extra.push(format!("sampler.mode={}", progen::config::mode_label(*m)));
            }
            let mut cfg = load_config(&cli, config, extra)?;
            cfg.sampler.calibration.extend(calibration.iter().cloned());
            let r = commands::forecast_cmd(
                &cfg,
                &ForecastArgs {
                    checkpoint: checkpoint.clone(),
                    split: *split,
                    window_index: *window_index,
                    out: out.clone(),
                },
            )?;
            for f in &r.files {
                println!("wrote {}", f.display());
            }
        }
        Command::Evaluate {
            pred,
            truth,
            alpha,
            out,
        } => {
            let report = commands::evaluate_cmd(pred, truth, *alpha, out.as_deref())?;
            if out.is_none() {
                print!("{report}");
            }
        }
        Command::Verify { suite, alpha, out } => {
            let table = verify::verify_cmd(*suite, &VerifyOptions { alpha: *alpha }, out.as_deref())?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
