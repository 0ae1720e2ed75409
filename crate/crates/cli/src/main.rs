//! Command-line entry points for the simulate / train / eval / ingest /
//! export-depth pipeline. Exit codes: 0 success, 2 configuration or input
//! error, 3 training abort (non-finite loss; the last checkpoint stays on
//! disk), 1 anything else.

use clap::{Parser, Subcommand};
use spisr_core::io::ExperimentConfig;
use spisr_core::runner::{self, DepthMethod};
use spisr_core::Error;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "spisr", version, about = "Single-photon super-resolution pipeline")]
struct Cli {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for data generation and evaluation (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset (train/val/test cubes + manifest).
    Simulate,
    /// Train the configured mode against a dataset directory.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Continue bitwise-exactly from checkpoint_last in the output dir.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate the trilinear baseline plus any checkpoints on the test split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Model checkpoints as name=path; repeatable. The trilinear baseline
        /// is always included and needs no checkpoint.
        #[arg(long = "checkpoint", value_name = "NAME=PATH")]
        checkpoints: Vec<String>,
    },
    /// Register an externally measured LR cube into a dataset directory.
    Ingest {
        #[arg(long)]
        cube: PathBuf,
        /// JSON with {"sbr": .., "gamma": .., "scale": [t, r, c]}.
        #[arg(long)]
        meta: PathBuf,
    },
    /// Extract a depth map from a stored cube.
    ExportDepth {
        #[arg(long)]
        cube: PathBuf,
        /// softargmax | mle
        #[arg(long, default_value = "softargmax")]
        method: String,
        #[arg(long, default_value_t = 3.0)]
        pulse_fwhm: f64,
        #[arg(long, default_value_t = 9)]
        pulse_support: usize,
    },
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_)
        | Error::Format { .. }
        | Error::DimMismatch(_)
        | Error::InvalidValue(_)
        | Error::NotNormalized { .. }
        | Error::DepthOutOfRange { .. }
        | Error::Indivisible { .. } => 2,
        Error::Train(_) | Error::NonFiniteGradient(_) => 3,
        Error::Io { .. } => 1,
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<PathBuf, Error> {
    cli.out
        .clone()
        .ok_or_else(|| Error::Config("--out is required for this command".into()))
}

fn parse_checkpoints(specs: &[String]) -> Result<Vec<(String, PathBuf)>, Error> {
    specs
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(name, path)| (name.to_string(), PathBuf::from(path)))
                .ok_or_else(|| {
                    Error::Config(format!("checkpoint '{s}' must be NAME=PATH"))
                })
        })
        .collect()
}

fn run(cli: &Cli) -> Result<(), Error> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli)?;
            let manifest = runner::run_simulate(&cfg, &out)?;
            println!(
                "simulated {} train / {} val / {} test samples into {}",
                manifest.train.len(),
                manifest.val.len(),
                manifest.test.len(),
                out.display()
            );
        }
        Command::Train { dataset, resume } => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli)?;
            let run = runner::run_train(&cfg, dataset, &out, *resume)?;
            if let Some(last) = run.history.last() {
                println!(
                    "trained {} epochs; final loss {:.6}{}",
                    run.state.epochs_done,
                    last.l_total,
                    last.val_rmse
                        .map(|v| format!(", val rmse {v:.4}"))
                        .unwrap_or_default()
                );
            } else {
                println!("nothing to train ({} epochs already done)", run.state.epochs_done);
            }
        }
        Command::Eval {
            dataset,
            checkpoints,
        } => {
            let cfg = load_config(cli)?;
            let out = out_dir(cli)?;
            let checkpoints = parse_checkpoints(checkpoints)?;
            let report = runner::run_eval(&cfg, dataset, &out, &checkpoints)?;
            print!("{}", report.to_table());
        }
        Command::Ingest { cube, meta } => {
            let out = out_dir(cli)?;
            let manifest = runner::run_ingest(cube, meta, &out)?;
            println!(
                "ingested {} into {} ({} training samples now registered)",
                cube.display(),
                out.display(),
                manifest.train.len()
            );
        }
        Command::ExportDepth {
            cube,
            method,
            pulse_fwhm,
            pulse_support,
        } => {
            let out = out_dir(cli)?;
            let method = match method.as_str() {
                "softargmax" => DepthMethod::SoftArgmax,
                "mle" => DepthMethod::Mle,
                other => {
                    return Err(Error::Config(format!(
                        "unknown method '{other}', expected softargmax | mle"
                    )))
                }
            };
            let path = runner::run_export_depth(cube, &out, method, *pulse_fwhm, *pulse_support)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
