//! Command-line entry point: gen -> train -> infer -> bench, plus a fast
//! invariant check suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hcot::bench::ReportFormat;
use hcot::config::ExperimentConfig;
use hcot::pipeline::{self, Mode};
use hcot::training::Stage;
use hcot::Error;

#[derive(Parser)]
#[command(
    name = "hcot",
    about = "Compressed-reasoning training and benchmarking pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/dev/test datasets for an experiment.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train one stage (aux, hcot, fullcot, nocot).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_parser = parse_stage)]
        stage: Stage,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        /// Intra-run parallelism (default 1 for reproducible benchmarks).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Run inference over the test split (or one question).
    Infer {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: ModeArg,
        /// Answer a single question instead of the test split.
        #[arg(long)]
        question: Option<String>,
        /// Also decode the hidden thoughts into the trace dump.
        #[arg(long)]
        recover: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Compute compression/speedup metrics and the accuracy grid.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "table")]
        format: String,
        /// Trace directory of the two-model run (defaults to this
        /// experiment's infer-hcot).
        #[arg(long)]
        hcot_dir: Option<PathBuf>,
        /// Trace directory of the baseline run (defaults to infer-fullcot).
        #[arg(long)]
        baseline_dir: Option<PathBuf>,
    },
    /// Run the invariant suite (numerics, model, generators, training).
    Check,
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse::<Stage>().map_err(|e| e.to_string())
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum ModeArg {
    Hcot,
    Fullcot,
    Nocot,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Hcot => Mode::Hcot,
            ModeArg::Fullcot => Mode::Fullcot,
            ModeArg::Nocot => Mode::Nocot,
        }
    }
}

fn env_threads() -> Option<usize> {
    std::env::var("HCOT_THREADS").ok()?.parse().ok()
}

fn resolve_threads(flag: Option<usize>) -> usize {
    flag.or_else(env_threads).unwrap_or(1).max(1)
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen {
            config,
            seed,
            force,
        } => {
            let cfg = load_config(&config, seed)?;
            let summary = pipeline::cmd_gen(&cfg, force)?;
            println!(
                "generated {} train / {} dev / {} test samples in {}",
                summary.train,
                summary.dev,
                summary.test,
                pipeline::Paths::data_dir(&cfg).display()
            );
            Ok(())
        }
        Command::Train {
            config,
            stage,
            seed,
            force,
            threads,
        } => {
            let cfg = load_config(&config, seed)?;
            let threads = resolve_threads(threads);
            let summary = pipeline::cmd_train(&cfg, stage, force, threads)?;
            println!(
                "stage {} done: best dev metric {:.4} at step {} (checkpoint {})",
                summary.stage.as_str(),
                summary.best_metric,
                summary.best_step,
                &summary.checkpoint_hash[..16]
            );
            Ok(())
        }
        Command::Infer {
            config,
            mode,
            question,
            recover,
            seed,
            force,
            threads,
        } => {
            let cfg = load_config(&config, seed)?;
            let threads = resolve_threads(threads);
            let summary = pipeline::cmd_infer(
                &cfg,
                mode.into(),
                question.as_deref(),
                recover,
                force,
                threads,
            )?;
            match summary.single {
                Some((answer, handoffs)) => {
                    println!(
                        "answer: {}  handoffs: {handoffs}",
                        answer.as_deref().unwrap_or("<none>")
                    );
                }
                None => {
                    println!(
                        "mode {}: {} traces, accuracy {:.4}",
                        summary.mode.as_str(),
                        summary.n,
                        summary.accuracy
                    );
                }
            }
            Ok(())
        }
        Command::Bench {
            config,
            format,
            hcot_dir,
            baseline_dir,
        } => {
            let cfg = load_config(&config, None)?;
            let fmt: ReportFormat = format.parse()?;
            let rendered =
                pipeline::cmd_bench(&cfg, fmt, hcot_dir.as_deref(), baseline_dir.as_deref())?;
            println!("{rendered}");
            Ok(())
        }
        Command::Check => {
            let passed = pipeline::run_check()?;
            for name in &passed {
                println!("check {name}: ok");
            }
            println!("{} checks passed", passed.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
