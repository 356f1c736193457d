use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pinda_cli::config::ExperimentConfig;
use pinda_cli::data::{make_synthetic, save_csv, SyntheticSpec};
use pinda_cli::error::{CliError, Result};
use pinda_cli::experiment::{evaluate_checkpoint, run_experiment};
use pinda_cli::log_info;

#[derive(Parser)]
#[command(
    name = "pinda",
    about = "Contrastive training with a learned noise generator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline: load, train over all seeds, evaluate, and
    /// write the metrics JSON.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output path for the metrics report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved checkpoint under a config's protocol.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Output path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic dataset CSV from a spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check suite; exits nonzero if any family fails.
    Gradcheck {
        /// Random instances per loss family.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let report = run_experiment(&config)?;
            std::fs::write(&out, report.to_json())
                .map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
            log_info!(
                "wrote {}: knn {:.4} +- {:.4}, softmax {:.4} +- {:.4}",
                out.display(),
                report.knn.mean,
                report.knn.std,
                report.softmax.mean,
                report.softmax.std
            );
            Ok(true)
        }
        Command::Eval { checkpoint, config, out } => {
            let config = ExperimentConfig::load(&config)?;
            let report = evaluate_checkpoint(&config, &checkpoint)?;
            let json = report.to_json();
            match out {
                Some(path) => std::fs::write(&path, json)
                    .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?,
                None => println!("{json}"),
            }
            Ok(true)
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| CliError::Config(format!("{}: {e}", spec.display())))?;
            let spec: SyntheticSpec = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(e.to_string()))?;
            let ds = make_synthetic(&spec)?;
            save_csv(&ds, &out)?;
            log_info!("wrote {} ({} rows)", out.display(), ds.len());
            Ok(true)
        }
        Command::Gradcheck { instances } => {
            let settings = pinda_core::gradcheck::GradCheckSettings {
                instances,
                ..Default::default()
            };
            let reports = pinda_core::gradcheck::run_suite(&settings)
                .map_err(|e| CliError::Train(e.to_string()))?;
            let mut all_passed = true;
            for report in &reports {
                println!("{}", report.line());
                all_passed &= report.passed;
            }
            Ok(all_passed)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
