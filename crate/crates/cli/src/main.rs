mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use linkedcausal::{parallel, Error, Result};

use config::{DesignArgs, EstimateArgs, OutputArgs, RunConfig, SimulateArgs};

/// Causal effect estimation with a partially linked confounder cohort.
///
/// Exit codes: 1 input or validation error, 2 degenerate data or an unstable
/// simulation scenario, 3 numerical failure. Set LINKEDCAUSAL_THREADS to cap
/// the worker count.
#[derive(Debug, Parser)]
#[command(name = "linkedcausal", version, args_conflicts_with_subcommands = true)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// rerun the config embedded in a previous report (or a bare config file)
    #[arg(long)]
    config: Option<PathBuf>,
    /// output path when replaying a config
    #[arg(long, requires = "config")]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate treatment effects from a linked CSV file
    Estimate(EstimateArgs),
    /// Run the Monte Carlo study on a built-in data-generating mechanism
    Simulate(SimulateArgs),
    /// Choose the linkage fraction and sample size under a cost budget
    Design(DesignArgs),
}

fn extra_path(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.{suffix}"))
}

fn execute(cfg: RunConfig, out: Option<PathBuf>) -> Result<()> {
    let output = commands::run(&cfg)?;
    for w in &output.warnings {
        eprintln!("warning: {w}");
    }
    match out {
        Some(path) => {
            std::fs::write(&path, &output.main)?;
            for (suffix, text) in &output.extra {
                std::fs::write(extra_path(&path, suffix), text)?;
            }
        }
        None => print!("{}", output.main),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let split = |o: OutputArgs| o.out;
    match (cli.command, cli.config) {
        (Some(Command::Estimate(a)), _) => {
            let out = split(a.output.clone());
            execute(a.into(), out)
        }
        (Some(Command::Simulate(a)), _) => {
            let out = split(a.output.clone());
            execute(a.into(), out)
        }
        (Some(Command::Design(a)), _) => {
            let out = split(a.output.clone());
            execute(a.into(), out)
        }
        (None, Some(path)) => {
            let text = std::fs::read_to_string(&path)?;
            execute(RunConfig::from_report_text(&text)?, cli.out)
        }
        (None, None) => Err(Error::Validation("expected a subcommand (estimate, simulate, design) or --config".into())),
    }
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
    parallel::init_from_env();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
