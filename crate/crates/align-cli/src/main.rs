//! `align`: run divergence-alignment experiments, sweeps, Bradley-Terry
//! fits, and the invariant suite from the command line.
//!
//! Exit codes: 0 success, 1 failure (including failed checks), 2 config
//! error, 3 numeric abort.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use align_core::error::Error;
use align_core::harness::{
    run_experiment, run_invariant_suite, run_sweep, sweep_to_csv, ExperimentConfig, SweepAxis,
};
use align_core::preference::{fit_reward_model, BtFitConfig, BtVariant, PrefDataset};

#[derive(Parser)]
#[command(name = "align", about = "Divergence-minimization alignment laboratory", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutputFormat {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    Simplified,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file and write its metrics report.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Json)]
        format: OutputFormat,
    },
    /// Run the cross product of axis values over a base config; one CSV row
    /// per combination, in config order.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Axis spec `dotted.key=v1,v2,...`; repeatable.
        #[arg(long)]
        axis: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit a Bradley-Terry reward model to a preference CSV
    /// (columns prompt,winner,loser).
    Btfit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Variant::Full)]
        variant: Variant,
        /// Fraction of comparisons held out for evaluation.
        #[arg(long, default_value_t = 0.2)]
        heldout: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        max_iters: usize,
        /// One gradient step per comparison, in dataset order.
        #[arg(long)]
        online: bool,
        /// Output path for the fitted model CSV (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant suite; prints one pass/fail line per check.
    Check {
        /// Write the position-weight audit report (JSON) here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err.downcast_ref::<Error>() {
                Some(Error::Config(_)) | Some(Error::Domain(_)) => ExitCode::from(2),
                Some(Error::Numeric { .. }) => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn emit(out: &Option<PathBuf>, content: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, content)?,
        None => print!("{content}"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { config, seed, out, format } => {
            let text = fs::read_to_string(&config)?;
            let config = ExperimentConfig::from_toml_str(&text)?;
            let outcome = run_experiment(&config, seed)?;
            let content = match format {
                OutputFormat::Json => {
                    let mut json = outcome.report.to_json();
                    json.push('\n');
                    json
                }
                OutputFormat::Csv => outcome.report.to_csv(),
            };
            emit(&out, &content)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep { config, axis, seed, out } => {
            let text = fs::read_to_string(&config)?;
            let axes: Vec<SweepAxis> =
                axis.iter().map(|a| SweepAxis::parse(a)).collect::<Result<_, _>>()?;
            let rows = run_sweep(&text, &axes, seed)?;
            emit(&out, &sweep_to_csv(&rows, &axes))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Btfit { data, variant, heldout, seed, max_iters, online, out } => {
            let text = fs::read_to_string(&data)?;
            let dataset = PrefDataset::from_csv(&text)?;
            let config = BtFitConfig {
                variant: match variant {
                    Variant::Full => BtVariant::Full,
                    Variant::Simplified => BtVariant::Simplified,
                },
                heldout_fraction: heldout,
                seed,
                max_iters,
                online,
                ..Default::default()
            };
            let (model, report) = fit_reward_model(&dataset, &config)?;
            emit(&out, &model.to_csv())?;
            let heldout_str = report
                .heldout_ce
                .map(|ce| format!("{ce:.12}"))
                .unwrap_or_else(|| "n/a".to_string());
            println!(
                "train_ce={:.12} heldout_ce={heldout_str} iterations={} converged={}",
                report.train_ce, report.iterations, report.converged
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { out } => {
            let (outcomes, audit) = run_invariant_suite()?;
            let mut all_passed = true;
            for o in &outcomes {
                let status = if o.passed { "PASS" } else { "FAIL" };
                println!("check {:<36} {status}  {}", o.name, o.detail);
                all_passed &= o.passed;
            }
            if let Some(path) = out {
                fs::write(&path, serde_json::to_string_pretty(&audit)?)?;
                println!("position-weight audit written to {}", path.display());
            }
            Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}
