use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use s3attn_harness::commands::{execute, Command};
use s3attn_harness::output::Format;
use s3attn_harness::{ExperimentConfig, HarnessError};

#[derive(Parser)]
#[command(name = "s3attn", version, about = "Skeleton attention experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config field; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true, default_value = "csv")]
    format: String,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Train one model on a synthetic task.
    Train,
    /// Step time and peak tracked memory of vanilla and s3 across lengths.
    Bench,
    /// Accuracy under uniform input noise for vanilla and s3.
    Robustness,
    /// Single-component removals of the s3 model.
    Ablate,
    /// One run per value of fold, s1 or s2.
    Sweep,
    /// Skeleton reconstruction and incoherence harnesses.
    Sketch,
    /// Smoothing bound and incoherence-reduction harnesses.
    Smooth,
    /// Train and evaluate the forecaster on a CSV series.
    Forecast,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Train => Command::Train,
            Cmd::Bench => Command::Bench,
            Cmd::Robustness => Command::Robustness,
            Cmd::Ablate => Command::Ablate,
            Cmd::Sweep => Command::Sweep,
            Cmd::Sketch => Command::Sketch,
            Cmd::Smooth => Command::Smooth,
            Cmd::Forecast => Command::Forecast,
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| HarnessError::Config(format!("override {kv:?} is not KEY=VALUE")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = build_config(cli)?;
    let format: Format = cli.format.parse().map_err(HarnessError::Config)?;
    let (written, lines) = execute(cli.command.into(), &cfg, format)?;
    for line in lines {
        println!("{line}");
    }
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
