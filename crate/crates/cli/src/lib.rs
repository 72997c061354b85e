//! Command-line front end for the `ccfr` pipeline.

pub mod args;
pub mod commands;
pub mod config;

use anyhow::{Context, Result};
use clap::Parser;

pub use args::Cli;

/// Parses, resolves and runs one invocation.
pub fn run_from_args() -> Result<()> {
    let cli = Cli::parse();
    let cfg = config::resolve(&cli)?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cfg.threads {
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("starting worker pool")?;
    pool.install(|| commands::run(&cli.command, &cfg))
}
