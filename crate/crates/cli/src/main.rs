use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsrkit_cli::config::{self, CliError, SweepAxis};
use rsrkit_cli::experiment::{self, RunSummary};

#[derive(Parser)]
#[command(
    name = "rsrkit",
    version,
    about = "Anomaly detection with subspace-recovery autoencoders and linear baselines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a config file.
    Run {
        /// Path to a key = value config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed list (repeat for several seeds).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Train for the full-scale 10000 epochs instead of the configured count.
        #[arg(long)]
        full_scale: bool,
    },
    /// Run one experiment per value of a hyperparameter axis.
    Sweep {
        /// Path to a key = value config file (the sweep base).
        #[arg(long)]
        config: PathBuf,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the seed list (repeat for several seeds).
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        /// Train for the full-scale 10000 epochs instead of the configured count.
        #[arg(long)]
        full_scale: bool,
        /// Axis to sweep: d, learning_rate, lambda, or outlier_ratio.
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values (lambda sweeps the full value grid).
        #[arg(long)]
        values: String,
    },
    /// Score a CSV file with a saved checkpoint (model or subspace).
    Score {
        /// Checkpoint written by `run` (model_seed*.bin or subspace_seed*.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input CSV, one sample per row.
        #[arg(long)]
        input: PathBuf,
        /// Where to write the score CSV.
        #[arg(long)]
        output: PathBuf,
        /// Treat the last input column as 0/1 labels.
        #[arg(long)]
        labeled: bool,
    },
    /// Recompute AUC and AP from a labeled score CSV.
    Metrics {
        /// Score CSV written by `run` or `score`.
        #[arg(long)]
        input: PathBuf,
    },
}

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.4}"),
        None => "n/a".to_string(),
    }
}

fn print_summary(s: &RunSummary) {
    println!(
        "seeds: {} | AUC {} ± {} | AP {} ± {}",
        s.seeds_run,
        fmt_metric(s.mean_auc),
        fmt_metric(s.sd_auc),
        fmt_metric(s.mean_ap),
        fmt_metric(s.sd_ap)
    );
    println!("metrics: {}", s.metrics_path.display());
}

fn parse_values(s: &str) -> Result<Vec<f64>, CliError> {
    s.split(',')
        .map(|part| {
            let part = part.trim();
            part.parse::<f64>()
                .map_err(|e| CliError::Config(format!("values: invalid number '{part}': {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run {
            config,
            out,
            seeds,
            full_scale,
        } => {
            let mut c = config::load_config(&config)?;
            c.apply_overrides(out, &seeds, full_scale)?;
            let summary = experiment::run_experiment(&c)?;
            print_summary(&summary);
            Ok(())
        }
        Command::Sweep {
            config,
            out,
            seeds,
            full_scale,
            axis,
            values,
        } => {
            let mut c = config::load_config(&config)?;
            c.apply_overrides(out, &seeds, full_scale)?;
            let axis = SweepAxis::parse(&axis)?;
            let values = parse_values(&values)?;
            let table = experiment::run_sweep(&c, axis, &values)?;
            println!("sweep table: {}", table.display());
            Ok(())
        }
        Command::Score {
            checkpoint,
            input,
            output,
            labeled,
        } => {
            let n = experiment::score_with_checkpoint(&checkpoint, &input, &output, labeled)?;
            println!("scored {n} samples: {}", output.display());
            Ok(())
        }
        Command::Metrics { input } => {
            let report = experiment::metrics_from_scores(&input)?;
            println!("{report}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}
