//! Dual- versus single-decoder convergence comparison.
//!
//! For every seed the configured model (with its task-guided secondary
//! branch) and the same model without the secondary branch are pre-trained
//! from identical initial encoder and primary-decoder parameters. The
//! training semantic loss `L_S` of each run is smoothed with a trailing
//! moving average and summarised by its level at one epoch and its variance
//! over an epoch range.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;

use crate::error::{config_err, Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::train::{run_training, write_run, StageSelect, TrainData, TrainReport};
use crate::model::{Adsd, ENCODER, PRIMARY};
use crate::nn::ParamStore;

pub const WINDOW: usize = 10;
/// Inclusive 1-based epoch range of the variance statistic.
pub const VARIANCE_EPOCHS: (usize, usize) = (10, 40);
pub const LEVEL_EPOCH: usize = 20;
pub const MIN_SEEDS: usize = 3;

/// Trailing moving average; the first `window - 1` entries average over
/// what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let part = &values[lo..=i];
            part.iter().sum::<f64>() / part.len() as f64
        })
        .collect()
}

/// Population variance.
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    /// Smoothed `L_S` per epoch.
    pub smoothed: Vec<f64>,
    pub level: f64,
    pub variance: f64,
}

impl RunSummary {
    pub fn from_report(report: &TrainReport) -> Result<Self> {
        let raw: Vec<f64> = report.rows.iter().map(|r| r.losses.semantic).collect();
        let (lo, hi) = VARIANCE_EPOCHS;
        if raw.len() < hi {
            return Err(config_err!("convergence comparison needs at least {hi} epochs, run has {}", raw.len()));
        }
        let smoothed = moving_average(&raw, WINDOW);
        Ok(RunSummary {
            level: smoothed[LEVEL_EPOCH - 1],
            variance: variance(&smoothed[lo - 1..hi]),
            smoothed,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SeedComparison {
    pub seed: u64,
    pub dual: RunSummary,
    pub single: RunSummary,
    pub init_checksum: u64,
}

impl SeedComparison {
    pub fn variance_ok(&self) -> bool {
        self.dual.variance <= self.single.variance
    }

    pub fn level_ok(&self) -> bool {
        self.dual.level <= self.single.level
    }
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub seeds: Vec<SeedComparison>,
}

impl Comparison {
    fn majority(&self, f: impl Fn(&SeedComparison) -> bool) -> bool {
        2 * self.seeds.iter().filter(|s| f(s)).count() > self.seeds.len()
    }

    pub fn variance_majority(&self) -> bool {
        self.majority(SeedComparison::variance_ok)
    }

    pub fn level_majority(&self) -> bool {
        self.majority(SeedComparison::level_ok)
    }

    /// `seed,variant,level_epoch20,variance_epochs10_40,final_smoothed` rows.
    pub fn summary_csv(&self) -> String {
        let (lo, hi) = VARIANCE_EPOCHS;
        let mut s = format!("seed,variant,level_epoch{LEVEL_EPOCH},variance_epochs{lo}_{hi},final_smoothed\n");
        for c in &self.seeds {
            for (name, r) in [("dual", &c.dual), ("single", &c.single)] {
                let last = r.smoothed.last().copied().unwrap_or(f64::NAN);
                let _ = writeln!(s, "{},{name},{},{},{last}", c.seed, r.level, r.variance);
            }
        }
        s
    }

    /// Per-seed verdicts followed by a `majority` row.
    pub fn comparison_csv(&self) -> String {
        let mut s = String::from("seed,dual_variance,single_variance,variance_ok,dual_level,single_level,level_ok\n");
        for c in &self.seeds {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{}",
                c.seed,
                c.dual.variance,
                c.single.variance,
                c.variance_ok(),
                c.dual.level,
                c.single.level,
                c.level_ok()
            );
        }
        let _ = writeln!(s, "majority,,,{},,,{}", self.variance_majority(), self.level_majority());
        s
    }
}

fn smoothed_csv(report: &TrainReport, summary: &RunSummary) -> String {
    let mut s = String::from("epoch,L_S,L_S_smoothed\n");
    for (r, m) in report.rows.iter().zip(&summary.smoothed) {
        let _ = writeln!(s, "{},{},{m}", r.epoch, r.losses.semantic);
    }
    s
}

/// Checksum of the initial encoder and primary-decoder parameters.
fn init_checksum(cfg: &TrainConfig) -> Result<u64> {
    let mut store = ParamStore::<f32>::new();
    Adsd::new(&cfg.stage_model(&cfg.pretrain), &mut store, cfg.seed)?;
    Ok(store.checksum(&[ENCODER, PRIMARY]))
}

/// Runs both variants for every seed and writes
/// `out/seed{S}/{dual,single}/` run directories plus `summary.csv` and
/// `comparison.csv`.
pub fn compare_decoders(base: &TrainConfig, data: &TrainData<'_>, seeds: &[u64], out: &Path) -> Result<Comparison> {
    if seeds.len() < MIN_SEEDS {
        return Err(Error::Usage(format!("need at least {MIN_SEEDS} seeds, got {}", seeds.len())));
    }
    if base.pretrain.head.is_none() {
        return Err(config_err!("the dual-decoder variant needs a secondary head (pretrain.head)"));
    }
    if base.pretrain.epochs < VARIANCE_EPOCHS.1 {
        return Err(config_err!(
            "convergence comparison needs at least {} pre-training epochs, config has {}",
            VARIANCE_EPOCHS.1,
            base.pretrain.epochs
        ));
    }
    let mut results = Vec::new();
    for &seed in seeds {
        let dual_cfg = TrainConfig { seed, ..base.clone() };
        let mut single_cfg = dual_cfg.clone();
        single_cfg.pretrain.head = None;
        let checksum = init_checksum(&dual_cfg)?;
        if checksum != init_checksum(&single_cfg)? {
            return Err(Error::CheckFailed(format!(
                "seed {seed}: dual and single variants start from different encoder/primary parameters"
            )));
        }
        let mut summaries = Vec::new();
        for (name, cfg) in [("dual", &dual_cfg), ("single", &single_cfg)] {
            info!("seed {seed}: training {name}-decoder variant");
            let outcome = run_training(cfg, data, StageSelect::Pretrain, None)?;
            let summary = RunSummary::from_report(&outcome.report)?;
            let dir = out.join(format!("seed{seed}")).join(name);
            write_run(&dir, cfg, &outcome, "final")?;
            let path = dir.join("smoothed.csv");
            fs::write(&path, smoothed_csv(&outcome.report, &summary)).map_err(|e| Error::io(&path, e))?;
            summaries.push(summary);
        }
        let single = summaries.pop().expect("two runs");
        let dual = summaries.pop().expect("two runs");
        results.push(SeedComparison {
            seed,
            dual,
            single,
            init_checksum: checksum,
        });
    }
    let cmp = Comparison { seeds: results };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for (name, text) in [("summary.csv", cmp.summary_csv()), ("comparison.csv", cmp.comparison_csv())] {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(cmp)
}
