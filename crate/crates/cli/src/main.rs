//! `zapsa`: solve, analyse and simulate the Zap Q-learning experiments.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use config::{AlgoName, Overrides, RunConfig};
use output::Output;

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Exact Q*, h* and the optimal policy.
    Solve,
    /// Asymptotic covariance report, scalar gain sweep and PF certificate.
    Cov,
    /// One trajectory with Bellman-error and Ĉ diagnostics.
    Run,
    /// A full ensemble: W histograms, covariance vs theory, confidence bands.
    Bench,
}

#[derive(clap::Args, Clone)]
struct Flags {
    /// JSON config file (a run manifest also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<u64>,
    #[arg(long, global = true, value_enum)]
    algo: Option<AlgoName>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    rho: Option<f64>,
    #[arg(long, global = true)]
    gain: Option<f64>,
}

#[derive(Parser)]
#[command(name = "zapsa", version, about = "Zap stochastic Newton-Raphson and Q-learning experiments")]
struct Args {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

fn execute(command: Command, flags: Flags) -> zapsa::Result<()> {
    if let Ok(v) = std::env::var("ZAPSA_THREADS") {
        let threads = v.trim().parse().map_err(|_| zapsa::Error::InvalidConfig(format!("ZAPSA_THREADS={v} is not a count")))?;
        zapsa::bench::configure_threads(threads)?;
    }
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(Overrides {
        out: flags.out,
        seed: flags.seed,
        trials: flags.trials,
        steps: flags.steps,
        algorithm: flags.algo,
        beta: flags.beta,
        rho: flags.rho,
        gain: flags.gain,
    });
    let env = cfg.resolve()?;
    let mut out = Output::create(&cfg)?;
    let (name, lines) = match command {
        Command::Solve => ("solve", commands::solve(&cfg, &env, &mut out)?),
        Command::Cov => ("cov", commands::cov(&cfg, &env, &mut out)?),
        Command::Run => ("run", commands::run(&cfg, &env, &mut out)?),
        Command::Bench => ("bench", commands::bench(&cfg, &env, &mut out)?),
    };
    let files = out.finish(name, &cfg)?;
    for line in lines {
        println!("{line}");
    }
    println!("wrote {} files and manifest.json to {} (config {})", files.len(), cfg.out.display(), &cfg.hash()[..12]);
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(args.command, args.flags) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
