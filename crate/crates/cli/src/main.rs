use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{ensure, Result};
use clap::{Parser, Subcommand};
use msll_cli::commands;
use msll_cli::config::ExperimentConfig;

/// Multiple-shooting parameter estimation for ODE models.
#[derive(Parser)]
#[command(name = "msll", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the datasets of an experiment's batch protocol.
    Simulate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        scale: Option<f64>,
    },
    /// Fit one dataset; writes the report and `<report>.traj.csv`.
    Estimate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        dataset: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Run the full protocol and write per-run reports and a summary.
    Benchmark {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        /// Worker threads for independent realizations.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long)]
        scale: Option<f64>,
    },
}

const EXIT_ERROR: u8 = 1;
const EXIT_NOT_CONVERGED: u8 = 2;

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(|| "dataset".into(), |s| s.to_string_lossy().into_owned())
}

fn check_scale(scale: Option<f64>) -> Result<()> {
    if let Some(s) = scale {
        ensure!(s > 0.0 && s.is_finite(), "--scale must be positive, got {s}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Simulate { config, output, scale } => {
            check_scale(scale)?;
            let cfg = ExperimentConfig::load(&config)?;
            let paths = commands::simulate(&cfg, &stem(&config), &output, scale)?;
            println!("wrote {} dataset(s) to {}", paths.len(), output.display());
            Ok(0)
        }
        Command::Estimate { config, dataset, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let rep = commands::estimate_file(&cfg, &dataset, &output)?;
            println!("{}: {} after {} iterations", output.display(), rep.termination, rep.iterations);
            if !rep.detail.is_empty() {
                println!("  {}", rep.detail);
            }
            Ok(if rep.converged { 0 } else { EXIT_NOT_CONVERGED })
        }
        Command::Benchmark { config, output, jobs, scale } => {
            check_scale(scale)?;
            ensure!(jobs >= 1, "--jobs must be at least 1");
            let cfg = ExperimentConfig::load(&config)?;
            let start = Instant::now();
            let summary = commands::benchmark(&cfg, &output, jobs, scale)?;
            println!(
                "{} runs, {} converged ({:.1}%), {:.1}s; summary in {}",
                summary.runs,
                summary.converged,
                summary.conv_percent(),
                start.elapsed().as_secs_f64(),
                output.join("summary.csv").display()
            );
            for row in &summary.rows {
                println!("  {:<14} {:>12.6} ± {:.6}", row.name, row.mean, row.sd);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_ERROR) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_ERROR)
        }
    }
}
