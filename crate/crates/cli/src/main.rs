//! `adsd`: dataset generation, training, evaluation and verification.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, LevelFilter};

use adsd_core::data::{generate_dataset, Dataset};
use adsd_core::harness::checkpoint;
use adsd_core::harness::compare::{compare_decoders, MIN_SEEDS};
use adsd_core::harness::config::TrainConfig;
use adsd_core::harness::eval::run_eval;
use adsd_core::harness::gradcheck_suite::{results_csv, run_suite};
use adsd_core::harness::train::{run_training, write_run, StageSelect, TrainData};
use adsd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "adsd", version, about = "RGBD semantic segmentation with a dual supervised decoder")]
struct Cli {
    /// More log output (-v debug, -vv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded synthetic RGBD dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Image height and width.
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        classes: usize,
    },
    /// Train a model; writes config.txt, report.csv, timing.csv and checkpoints.
    Train {
        /// Configuration file; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Validation dataset scored after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        stage: StageSelect,
        /// Pre-trained checkpoint for `--stage finetune` (default: OUT/pretrain).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint's primary decoder on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Summary CSV; per-class scores go to <stem>_per_class.csv beside it.
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks in double precision.
    Gradcheck {
        /// `all` or one suite name.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Pre-train dual- and single-decoder variants per seed and compare
    /// their smoothed training losses.
    CompareDecoders {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData {
            out,
            seed,
            count,
            size,
            classes,
        } => {
            let manifest = generate_dataset(&out, seed, count, (size[0], size[1]), classes)?;
            info!("wrote {} samples to {}", manifest.samples.len(), out.display());
        }
        Command::Train {
            config,
            data,
            out,
            val,
            stage,
            resume,
        } => {
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            let train = Dataset::load(&data)?;
            let val = val.as_deref().map(Dataset::load).transpose()?;
            let td = TrainData::new(&train, val.as_ref(), cfg.model.num_classes)?;
            let resume_store = match stage {
                StageSelect::Finetune => {
                    let dir = resume.unwrap_or_else(|| out.join("pretrain"));
                    Some(checkpoint::load_store::<f32>(&dir)?)
                }
                _ => None,
            };
            let outcome = run_training(&cfg, &td, stage, resume_store.as_ref())?;
            write_run(&out, &cfg, &outcome, "checkpoint")?;
            if let Some(m) = outcome.report.last_val() {
                println!("val pixacc={:.4} macc={:.4} miou={:.4}", m.pixacc, m.macc, m.miou);
            }
            info!("run written to {}", out.display());
        }
        Command::Eval { checkpoint, data, report } => {
            let r = run_eval(&checkpoint, &data)?;
            r.write(&report)?;
            print!("{}", r.summary_csv());
        }
        Command::Gradcheck { suite } => {
            let results = run_suite(&suite)?;
            print!("{}", results_csv(&results));
            let failed: Vec<&str> = results.iter().filter(|r| !r.passed()).map(|r| r.suite).collect();
            for r in &results {
                info!("{}: max rel err {:.2e} ({:.1}s)", r.suite, r.max_rel_err(), r.seconds);
            }
            if !failed.is_empty() {
                return Err(Error::CheckFailed(format!("gradient suites failed: {}", failed.join(", "))));
            }
        }
        Command::CompareDecoders {
            data,
            seeds,
            out,
            config,
        } => {
            if seeds.len() < MIN_SEEDS {
                return Err(Error::Usage(format!("compare-decoders needs at least {MIN_SEEDS} seeds")));
            }
            let cfg = load_config(config.as_deref())?;
            cfg.validate()?;
            let train = Dataset::load(&data)?;
            let td = TrainData::new(&train, None, cfg.model.num_classes)?;
            let cmp = compare_decoders(&cfg, &td, &seeds, &out)?;
            print!("{}", cmp.comparison_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => LevelFilter::Warn,
        (false, 0) => LevelFilter::Info,
        (false, 1) => LevelFilter::Debug,
        _ => LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
