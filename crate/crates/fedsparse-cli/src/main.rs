//! `fedsparse` — run dictionary-sparse federated experiments from a TOML
//! config: synthetic data, FedGradMP or a baseline, per-round CSVs, and
//! optional convergence-rate predictions from measured curvature.

// Negated comparisons like `!(x > 0.0)` are deliberate throughout: they
// reject NaN (which passes `x <= 0.0`) without a separate is_nan check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod runner;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use config::ExperimentConfig;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "fedsparse", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (sweep value, seed) cell of an experiment config.
    Run {
        /// Path to the experiment TOML.
        config: PathBuf,
        /// Overwrite existing output files.
        #[arg(long)]
        force: bool,
        /// Worker threads for per-round client updates (requires the
        /// `parallel` build; 1 behaves like the sequential build).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Print the full default config as TOML.
    PrintDefaults,
    /// Parse and validate a config without running anything.
    Validate {
        /// Path to the experiment TOML.
        config: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run {
            config,
            force,
            threads,
        } => {
            if let Some(n) = threads {
                configure_threads(n)?;
            }
            let parsed = load(&config)?;
            let output_dir = output_dir(&parsed);
            runner::run_experiment(&parsed, &output_dir, force)
        }
        Command::PrintDefaults => {
            print!("{}", ExperimentConfig::default().to_toml());
            Ok(())
        }
        Command::Validate { config } => {
            let parsed = load(&config)?;
            let cells = parsed.cells();
            println!(
                "ok: {} cell(s) -> {}",
                cells.len(),
                output_dir(&parsed).display()
            );
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", path.display()))
}

/// The config's output_dir, unless FEDSPARSE_OUTPUT_DIR overrides it.
fn output_dir(config: &ExperimentConfig) -> PathBuf {
    match std::env::var_os("FEDSPARSE_OUTPUT_DIR") {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => config.experiment.output_dir.clone(),
    }
}

#[cfg(feature = "parallel")]
fn configure_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")
}

#[cfg(not(feature = "parallel"))]
fn configure_threads(_n: usize) -> Result<()> {
    anyhow::bail!("this binary was built without the `parallel` feature; --threads is unavailable")
}
