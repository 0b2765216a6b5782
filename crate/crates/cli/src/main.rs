use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use sktlab::harness::commands::{run_command, Command};
use sktlab::harness::config::ExperimentConfig;
use sktlab::harness::output::Formats;

#[derive(Parser)]
#[command(name = "sktlab", version, about = "Particle and semi-discrete cross-diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run a particle ensemble and export traces.
    Simulate(Common),
    /// Integrate the semi-discrete system on each grid of m_grid.
    Ode(Common),
    /// Particle gap against the fine reference over the (M, N) grid.
    Converge(Common),
    /// Semi-discrete error against the fine reference over M.
    SdConverge(Common),
    /// Randomised discrete energy-inequality instances.
    DualityCheck(Common),
    /// Deviation frequencies of Poisson and particle counting processes.
    LdCheck(Common),
    /// Spectrum, jump-size and interpolation checks.
    Norms(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "SKTLAB_WORKERS")]
    workers: Option<usize>,
    /// Comma-separated subset of csv,json,svg.
    #[arg(long, default_value = "csv,json,svg")]
    format: Formats,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let (cmd, args) = match cli.command {
        Sub::Simulate(a) => (Command::Simulate, a),
        Sub::Ode(a) => (Command::Ode, a),
        Sub::Converge(a) => (Command::Converge, a),
        Sub::SdConverge(a) => (Command::SdConverge, a),
        Sub::DualityCheck(a) => (Command::DualityCheck, a),
        Sub::LdCheck(a) => (Command::LdCheck, a),
        Sub::Norms(a) => (Command::Norms, a),
    };
    let mut cfg = match &args.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("sktlab-out"));
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let outcome = run_command(cmd, &cfg, args.config.as_deref(), &out, args.format, workers)?;
    for c in &outcome.checks {
        println!(
            "{} {} = {} (expected {})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.expected
        );
    }
    if !outcome.passed() {
        eprintln!(
            "{} check(s) failed; see {}",
            outcome.failures.len(),
            out.join("failures.json").display()
        );
    }
    Ok(outcome.passed())
}
