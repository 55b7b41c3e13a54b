//! Experiment CLI: dataset generation, training, evaluation, edge add/drop
//! robustness sweeps, and property audits.
//!
//! Exit codes: 0 success, 1 validation error, 2 audit failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use drlabel::graph::PerturbMode;
use drlabel::model::HeadMode;
use drlabel_cli::commands;
use drlabel_cli::config::ExperimentConfig;
use drlabel_cli::CliError;

#[derive(Parser)]
#[command(
    name = "drlabel",
    about = "Edge-projection label supervision harness: synthetic relaxation data, toy GNN training, and graph-perturbation robustness sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonConfig {
    /// JSON experiment config; defaults apply when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic relaxation dataset (JSONL plus metadata)
    GenData {
        #[command(flatten)]
        common: CommonConfig,
        /// Override the dataset seed
        #[arg(long)]
        seed: Option<u64>,
        /// Override the instance count
        #[arg(long)]
        n_instances: Option<usize>,
    },
    /// Train a model on a generated dataset
    Train {
        #[command(flatten)]
        common: CommonConfig,
        /// Dataset JSONL produced by gen-data
        #[arg(long)]
        dataset: PathBuf,
        /// Displacement head: sum or drlabel
        #[arg(long)]
        head_mode: Option<HeadMode>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Override the training seed
        #[arg(long)]
        seed: Option<u64>,
        /// Fraction of each batch receiving a noisy-augmented copy
        #[arg(long)]
        noisy_fraction: Option<f64>,
        /// Number of random splits to train (mean/std summary across them)
        #[arg(long)]
        n_splits: Option<usize>,
        /// Continue training from an existing checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on its training dataset splits
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Also write metrics.json here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Edge add/drop robustness sweep comparing the two heads
    Robustness {
        #[arg(long)]
        checkpoint_sum: PathBuf,
        #[arg(long)]
        checkpoint_drlabel: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated perturbation fractions
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])]
        fractions: Vec<f64>,
        /// Comma-separated modes: drop, add, add-new-pair
        #[arg(long, value_delimiter = ',', default_values = ["drop", "add"])]
        modes: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the randomized geometric property audits
    Audit {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write audit.json here
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negative control: corrupt one magnitude so the audit must fail
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn parse_mode(s: &str) -> Result<PerturbMode, CliError> {
    match s {
        "drop" => Ok(PerturbMode::Drop),
        "add" => Ok(PerturbMode::AddDuplicate),
        "add-new-pair" => Ok(PerturbMode::AddNewPair),
        other => Err(CliError::validation(format!(
            "unknown mode '{other}' (expected drop|add|add-new-pair)"
        ))),
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable report"));
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common, seed, n_instances } => {
            let mut config = ExperimentConfig::load(common.config.as_deref())?;
            if let Some(seed) = seed {
                config.dataset.seed = seed;
            }
            if let Some(n) = n_instances {
                config.dataset.params.n_instances = n;
            }
            let summary = commands::gen_data(&config, &common.out)?;
            print_json(&summary);
            Ok(())
        }
        Command::Train {
            common,
            dataset,
            head_mode,
            epochs,
            seed,
            noisy_fraction,
            n_splits,
            resume,
        } => {
            let mut config = ExperimentConfig::load(common.config.as_deref())?;
            if let Some(mode) = head_mode {
                config.model.head_mode = mode;
            }
            if let Some(epochs) = epochs {
                config.train.epochs = epochs;
            }
            if let Some(seed) = seed {
                config.train.seed = seed;
            }
            if let Some(f) = noisy_fraction {
                config.train.noisy_fraction = f;
            }
            if let Some(n) = n_splits {
                config.train.n_splits = n;
            }
            let summary = commands::train_cmd(&commands::TrainArgs {
                config,
                dataset,
                out_dir: common.out,
                resume,
            })?;
            print_json(&summary);
            Ok(())
        }
        Command::Eval { checkpoint, dataset, out } => {
            let report = commands::eval_cmd(&checkpoint, &dataset, out.as_deref())?;
            print_json(&report);
            Ok(())
        }
        Command::Robustness {
            checkpoint_sum,
            checkpoint_drlabel,
            dataset,
            fractions,
            modes,
            seed,
            out,
        } => {
            let modes = modes
                .iter()
                .map(|m| parse_mode(m))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = commands::robustness_cmd(&commands::RobustnessArgs {
                checkpoint_sum,
                checkpoint_drlabel,
                dataset,
                fractions,
                modes,
                seed,
                out_dir: out,
            })?;
            print!("{}", drlabel_cli::report::robustness_csv(&rows));
            Ok(())
        }
        Command::Audit { trials, seed, out, corrupt } => {
            let report = commands::audit_cmd(trials, seed, corrupt, out.as_deref())?;
            print_json(&report);
            if !report.passed {
                let failing: Vec<&str> = report
                    .sections
                    .iter()
                    .filter(|s| !s.passed)
                    .map(|s| s.name.as_str())
                    .collect();
                return Err(CliError::AuditFailed(failing.join(", ")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code())
        }
    }
}
