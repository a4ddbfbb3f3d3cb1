use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use nemgan_core::autodiff::GradCheckOptions;
use nemgan_core::runner::{self, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "nemgan",
    version,
    about = "Mode-matching GAN experiments on synthetic mixtures"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a config file; writes config, metrics, checkpoint and manifest.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint against a fresh balanced test set.
    Eval {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 5000)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the report as a one-row CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint, optionally from a single mode.
    Sample {
        #[arg(short, long)]
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        /// Fix the latent mode to this index.
        #[arg(short, long)]
        mode: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Compare every loss gradient with central differences.
    Gradcheck {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        /// Probed coordinates per parameter tensor.
        #[arg(long, default_value_t = 64)]
        probes: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Time full training steps.
    Bench {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: u64,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let summary = runner::cmd_train(&config, &out)
                .with_context(|| format!("training from {}", config.display()))?;
            if let Some(last) = summary.history.last() {
                println!("{:?}", last.metrics);
            }
            println!("run written to {}", out.display());
        }
        Command::Eval {
            checkpoint,
            n,
            seed,
            csv,
        } => {
            let report = runner::cmd_eval(&checkpoint, n, seed, csv.as_deref())
                .with_context(|| format!("evaluating {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Sample {
            checkpoint,
            n,
            mode,
            seed,
            out,
            svg,
        } => {
            let s = runner::cmd_sample(&checkpoint, n, mode, seed, &out, svg.as_deref())
                .with_context(|| format!("sampling {}", checkpoint.display()))?;
            println!("{} samples written to {}", s.samples.len(), out.display());
        }
        Command::Gradcheck {
            config,
            batch,
            probes,
            tolerance,
        } => {
            let opts = GradCheckOptions {
                tolerance,
                max_probes_per_param: Some(probes),
                ..Default::default()
            };
            let summary = runner::cmd_gradcheck(&config, &opts, batch)?;
            for t in &summary.terms {
                println!(
                    "{:<16} max rel err {:.3e} over {} probes  {}",
                    t.term,
                    t.report.max_relative_error,
                    t.report.probes,
                    if t.report.passed { "ok" } else { "FAIL" }
                );
            }
            if !summary.passed() {
                eprintln!(
                    "gradient check failed: worst {:.3e} > {tolerance:e}",
                    summary.worst()
                );
                return Ok(ExitCode::from(2));
            }
        }
        Command::Bench { config, steps } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = runner::cmd_bench(&cfg, steps)?;
            println!(
                "{} steps, batch {}: {:.3} ms/step ({:.2} s)",
                r.steps, r.batch_size, r.ms_per_step, r.seconds
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
