use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod io;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "nngp", version, about = "Nearest-neighbor Gaussian process models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Caps the number of worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset and its truth files.
    Simulate,
    /// Run the sampler on a dataset.
    Fit,
    /// Predict at new locations from stored samples.
    Predict,
    /// Model-comparison and holdout metrics from stored samples.
    Metrics,
    /// KL divergence from the parent process over neighbor-set sizes.
    Kl,
    /// Per-iteration timing over a sweep of dataset sizes.
    Bench,
}

fn run(cli: &Cli) -> anyhow::Result<PathBuf> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if let Some(t) = cli.threads {
        cfg.threads = Some(t);
    }
    if let Some(t) = cfg.threads {
        if t == 0 {
            anyhow::bail!(error::CliError::validation("threads must be at least 1"));
        }
        if !nngp::par::init_threads(t) {
            log::debug!("worker pool already initialized; threads = {t} not applied");
        }
    }
    match cli.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Fit => commands::fit(&cfg),
        Command::Predict => commands::predict_cmd(&cfg),
        Command::Metrics => commands::metrics(&cfg),
        Command::Kl => commands::kl(&cfg),
        Command::Bench => commands::bench(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(error::classify(&e).code() as u8)
        }
    }
}
