use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use snitch_harness::files::{load_scenario, load_suite};
use snitch_harness::runner::{self, MetricsFormat};
use snitch_harness::Result;

#[derive(Parser)]
#[command(name = "snitch", version, about = "Digital-twin anomaly detection simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate twin thresholds and train the baseline on attack-free runs.
    Calibrate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one scenario.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricsFormat::Both)]
        format: MetricsFormat,
    },
    /// Run every scenario of a suite and aggregate.
    Suite {
        #[arg(long)]
        suite: PathBuf,
        /// Overrides the suite's master_seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricsFormat::Both)]
        format: MetricsFormat,
    },
    /// Pool per-step scores over a suite and write ROC curves.
    Roc {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Calibrate { config, out } => {
            let cfg = load_scenario(&config)?;
            let cal = runner::calibrate_to(&cfg, &out)?;
            for c in &cal.twin {
                eprintln!("{}: epsilon={:.6} sigma_sq={:.3e}", c.node, c.epsilon, c.sigma_sq);
            }
            for a in &cal.ann {
                eprintln!("{}: ann epsilon={:.6} validation_rmse={:.6}", a.node, a.detector.epsilon, a.validation_rmse);
            }
        }
        Command::Run { config, seed, out, format } => {
            let mut cfg = load_scenario(&config)?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            let (artifacts, run) = runner::run_to(&cfg, &out, format)?;
            for s in &run.scores {
                eprintln!(
                    "{}: detected={} delay={:?} rmse={:?}",
                    s.detector.as_str(),
                    s.detected,
                    s.report.detection_delay_steps,
                    s.report.rmse_pu
                );
            }
            eprintln!("trace: {}", artifacts.trace.display());
        }
        Command::Suite { suite, seed, out, format } => {
            let mut spec = load_suite(&suite)?;
            if let Some(s) = seed {
                spec.master_seed = s;
            }
            let result = runner::run_suite(&spec, false)?;
            runner::write_suite(&result, &out, format)?;
            for a in &result.aggregates {
                eprintln!(
                    "{}: accuracy={:?} mean_delay={:?} censored_delay={:?} rmse={:?} auc={:?} failures={}",
                    a.detector.as_str(),
                    a.report.accuracy,
                    a.report.detection_delay_steps,
                    a.mean_censored_delay_steps,
                    a.report.rmse_pu,
                    a.report.auc,
                    a.failures
                );
            }
        }
        Command::Roc { suite, seed, out } => {
            let mut spec = load_suite(&suite)?;
            if let Some(s) = seed {
                spec.master_seed = s;
            }
            let result = runner::run_suite(&spec, false)?;
            runner::write_roc(&result, &out)?;
            for s in result.roc_summaries() {
                eprintln!("{}: auc={:?}", s.score.as_str(), s.auc);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
