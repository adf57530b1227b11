use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Parser, Subcommand};
use jumpflow_cli::config::ExperimentConfig;
use jumpflow_cli::runner::{self, Command, Status};
use jumpflow_cli::{exit, exit_code, output};

/// Environment variable that overrides the configured output directory.
const OUT_ENV: &str = "JUMPFLOW_OUT";

#[derive(Parser)]
#[command(name = "jumpflow", version, about = "Simulate and analyse jump-driven flows")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve one path and write the trajectory.
    Simulate(Flags),
    /// Split the flow into horizontal and vertical factors.
    Decompose(Flags),
    /// Check the change-of-variables identity over a refinement ladder.
    VerifyIvk(Flags),
    /// Measure an empirical convergence order.
    Convergence(Flags),
    /// Aggregate statistics over many seeded paths.
    Ensemble(Flags),
}

#[derive(clap::Args)]
struct Flags {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; takes precedence over the environment and the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the path seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the ladder depth.
    #[arg(long)]
    ladder: Option<usize>,
}

fn split(cmd: Cmd) -> (Command, Flags) {
    match cmd {
        Cmd::Simulate(f) => (Command::Simulate, f),
        Cmd::Decompose(f) => (Command::Decompose, f),
        Cmd::VerifyIvk(f) => (Command::VerifyIvk, f),
        Cmd::Convergence(f) => (Command::Convergence, f),
        Cmd::Ensemble(f) => (Command::Ensemble, f),
    }
}

fn load(flags: &Flags) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&flags.config)?;
    if let Some(seed) = flags.seed {
        cfg.override_seed(seed);
    }
    if let Some(depth) = flags.ladder {
        cfg.ladder_depth = depth;
    }
    if let Some(dir) = std::env::var_os(OUT_ENV) {
        cfg.output_dir = dir.into();
    }
    if let Some(dir) = &flags.out {
        cfg.output_dir = dir.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let (command, flags) = split(Cli::parse().command);
    let cfg = match load(&flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(exit::CONFIG as u8);
        }
    };

    let start = Instant::now();
    let outcome = match runner::run(command, &cfg) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("{} failed: {e:#}", command.name());
            return ExitCode::from(exit_code(&e) as u8);
        }
    };
    if let Err(e) = output::write_all(&cfg.output_dir, &outcome.artifacts) {
        eprintln!("{e:#}");
        return ExitCode::from(exit_code(&e) as u8);
    }
    eprintln!(
        "{}: wrote {} files to {} in {:.3} s",
        command.name(),
        outcome.artifacts.len(),
        cfg.output_dir.display(),
        start.elapsed().as_secs_f64()
    );

    let code = match outcome.status {
        Status::Success => exit::SUCCESS,
        Status::PropertyViolation(msg) => {
            eprintln!("property violated: {msg}");
            exit::PROPERTY
        }
        Status::StoppedAtTau(tau) => {
            eprintln!("decomposition stopped at tau = {tau}");
            exit::STOPPED_AT_TAU
        }
    };
    ExitCode::from(code as u8)
}
