//! Experiment harness: simulate datasets, run estimators, benchmark a grid
//! and summarize results.

mod commands;
mod config;
mod report;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{EstimateArgs, Estimator};
use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("estimator aborted: {0}")]
    Abort(ellipse_robust::Error),
    #[error("{0}")]
    Parse(ellipse_robust::Error),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Abort(_) => 2,
            CliError::Parse(_) | CliError::Io(_) => 3,
        }
    }
}

#[derive(Parser)]
#[command(name = "ellipse-robust", version, about = "Robust scatter estimation experiments")]
struct Cli {
    /// Worker threads for data-parallel kernels (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets of a config grid plus a manifest.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the seed list with this seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run one estimator on a dataset file.
    Estimate {
        #[arg(long)]
        data: PathBuf,
        /// Supplies the estimator settings; defaults are used without it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "pipeline")]
        estimator: String,
        /// Contamination rate assumed by the estimator.
        #[arg(long)]
        epsilon: Option<f64>,
        /// Manifest holding the true scatter, for error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
    /// Run every estimator over the config grid and write results.csv.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Restrict the run to one estimator.
        #[arg(long)]
        estimator: Option<String>,
    },
    /// Median table and error-vs-epsilon charts from results.csv.
    Report {
        results: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = ExperimentConfig::from_json(&text)?;
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match cli.command {
        Command::Simulate { config, out, seed } => {
            let cfg = load_config(&config, seed)?;
            let out = commands::default_out(Some(&cfg), out);
            let n = commands::simulate(&cfg, &out)?;
            println!("wrote {n} datasets and manifest.json to {}", out.display());
        }
        Command::Estimate {
            data,
            config,
            out,
            estimator,
            epsilon,
            truth,
        } => {
            let cfg = config.as_ref().map(|p| load_config(p, None)).transpose()?;
            let (mut pipeline, tail) = match &cfg {
                Some(c) => (c.estimator.pipeline.clone(), c.estimator.tail),
                None => (Default::default(), ellipse_robust::applications::TailModel::hanson_wright()),
            };
            if let Some(e) = epsilon {
                pipeline.epsilon = e;
            }
            pipeline
                .validate()
                .map_err(|e| CliError::Usage(format!("invalid estimator settings: {e}")))?;
            let truth = truth.as_deref().map(commands::read_truth).transpose()?;
            let out = commands::default_out(cfg.as_ref(), out);
            commands::estimate(&EstimateArgs {
                data: &data,
                out: &out,
                estimator: Estimator::parse(&estimator)?,
                pipeline,
                tail,
                truth,
            })?;
            println!("wrote report.json and trace.jsonl to {}", out.display());
        }
        Command::Bench {
            config,
            out,
            seed,
            estimator,
        } => {
            let cfg = load_config(&config, seed)?;
            let only = estimator.as_deref().map(Estimator::parse).transpose()?;
            let out = commands::default_out(Some(&cfg), out);
            let s = commands::bench(&cfg, &out, only)?;
            println!(
                "wrote {} rows to {} ({} aborted)",
                s.rows,
                out.join("results.csv").display(),
                s.failures
            );
        }
        Command::Report { results, out } => {
            let out = out.unwrap_or_else(|| results.parent().map(PathBuf::from).unwrap_or_default());
            print!("{}", report::report(&results, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ELLIPSE_ROBUST_LOG", "warn")).init();
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
            ExitCode::from(e.exit_code())
        }
    }
}
