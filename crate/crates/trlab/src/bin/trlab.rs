//! Command-line front end for the experiment pipeline. All behavior lives
//! in [`trlab::experiment`]; this binary only parses arguments, prints the
//! stage reports, and maps errors to a non-zero exit code.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trlab::error::Result;
use trlab::experiment::{
    run_bench, run_decode, run_gen_data, run_sweep, run_train, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "trlab",
    version,
    about = "Neural transducer lab: data, training, decoding, benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/dev/test splits.
    GenData {
        /// Experiment configuration (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Train a model and write the best checkpoint plus the loss trace.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Decode the test split and report quality and efficiency metrics.
    Decode {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
    /// Time repeated decodes of the test split on a single thread.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Untimed runs before measurement starts.
        #[arg(long, default_value_t = 1)]
        warmup: usize,
        /// Timed runs.
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
    /// Decode once per threshold grid point and write the trade-off curve.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads; 0 uses all cores.
        #[arg(long, default_value_t = 0)]
        jobs: usize,
    },
}

fn load(config: &Path) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(config)?;
    println!("config {}", cfg.hash()?);
    println!("work dir {}", cfg.paths.work_dir.display());
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { config, jobs } => {
            let cfg = load(&config)?;
            let report = run_gen_data(&cfg, jobs)?;
            println!(
                "wrote {} train / {} dev / {} test utterances",
                report.train_utterances, report.dev_utterances, report.test_utterances
            );
            println!(
                "test oracle non-blank percentage {:.2}",
                report.test_oracle_nbp
            );
        }
        Command::Train { config } => {
            let cfg = load(&config)?;
            let report = run_train(&cfg)?;
            println!(
                "best epoch {} with dev joint loss {:.6}",
                report.best_epoch, report.best_dev_joint
            );
            if report.skipped_utterances > 0 {
                println!("skipped {} utterances", report.skipped_utterances);
            }
            println!("checkpoint {}", report.checkpoint.display());
        }
        Command::Decode { config, jobs } => {
            let cfg = load(&config)?;
            let report = run_decode(&cfg, jobs)?;
            let s = &report.summary;
            println!(
                "decoded {} utterances: WER {:.2} NBP {:.2} JCR {:.2} RTF {:.4}",
                report.utterances, s.wer, s.nbp, s.jcr, s.rtf
            );
            println!("report {}", report.report_path.display());
            println!("summary {}", report.summary_path.display());
        }
        Command::Bench {
            config,
            warmup,
            repeats,
        } => {
            let cfg = load(&config)?;
            let report = run_bench(&cfg, warmup, repeats)?;
            println!(
                "{} warm-up + {} timed runs: mean RTF {:.4} (WER {:.2})",
                report.warmup_runs, report.timed_runs, report.mean_rtf, report.summary.wer
            );
            println!("report {}", report.report_path.display());
        }
        Command::Sweep { config, jobs } => {
            let cfg = load(&config)?;
            let report = run_sweep(&cfg, jobs)?;
            println!("swept {} grid points", report.rows.len());
            for row in &report.rows {
                let fmt = |v: Option<f64>| v.map_or_else(|| "-".into(), |x| format!("{x}"));
                println!(
                    "  {} lambda_ctc {} lambda_hat {}: WER {:.2} NBP {:.2} JCR {:.2} RTF {:.4}",
                    row.mode,
                    fmt(row.lambda_ctc),
                    fmt(row.lambda_hat),
                    row.wer,
                    row.nbp,
                    row.jcr,
                    row.rtf
                );
            }
            println!("curve {}", report.curve_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
