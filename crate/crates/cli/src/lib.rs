//! Command-line front end for ADR training, evaluation and diagnostics.

pub mod commands;
pub mod config;
pub mod error;

use clap::{Parser, Subcommand};

pub use config::{DatasetConfig, RunConfig, CONFIG_VERSION};
pub use error::CliError;

/// Environment variable that overrides `--threads`.
pub const THREADS_ENV: &str = "ADR_THREADS";

#[derive(Parser, Debug)]
#[command(name = "adr", version, about = "Adversarial training with annealed self-distillation rectification")]
pub struct Cli {
    /// Worker threads for parallel evaluation (overridden by ADR_THREADS).
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model from a JSON run config.
    Train(commands::TrainArgs),
    /// Standard and PGD robust accuracy of a checkpoint.
    Eval(commands::EvalArgs),
    /// Robust accuracy across attack radii or step counts.
    Sweep(commands::SweepArgs),
    /// Entropy, confidence-split and clean/adversarial consistency reports.
    Diagnose(commands::DiagnoseArgs),
    /// Weight-space or input-space loss landscape.
    Landscape(commands::LandscapeArgs),
}

fn thread_count(flag: usize) -> Result<usize, CliError> {
    let n = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .map_err(|e| CliError::Config(format!("{THREADS_ENV}='{v}': {e}")))?,
        Err(_) => flag,
    };
    if n == 0 {
        return Err(CliError::Config("thread count must be at least 1".into()));
    }
    Ok(n)
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    match &cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Landscape(a) => commands::landscape(a),
    }
}

/// Keeps large tensor buffers on the heap instead of fresh `mmap` regions.
///
/// Training allocates and frees multi-megabyte activations on every step;
/// with glibc's default thresholds each of them is page-faulted in anew,
/// which costs more than the arithmetic on the smaller models.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}
