use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use martingale_pe::config::ExperimentConfig;
use martingale_pe::experiments::{list_experiments, run_experiment};
use martingale_pe::fixtures::regen_fixtures;

#[derive(Parser)]
#[command(name = "mpe", version, about = "Martingale policy-evaluation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Exit successfully even when acceptance rows fail.
        #[arg(long)]
        report_only: bool,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the number of repetitions.
        #[arg(long)]
        repetitions: Option<usize>,
    },
    /// List the available experiments.
    List,
    /// Recompute the oracle fixtures and write them as TOML.
    Fixtures {
        /// Destination file; stdout when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, report_only, output_dir, repetitions } => {
            let mut cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            let report = run_experiment(&cfg)?;
            print!("{}", report.summary_text());
            println!("outputs in {}", report.output_dir.display());
            if report.passed() || report_only {
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::List => {
            for e in list_experiments() {
                println!("{:<20} {}\n{:<20} reproduces: {}", e.id.as_str(), e.description, "", e.reproduces);
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Fixtures { out } => {
            let text = regen_fixtures()?.to_toml()?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
