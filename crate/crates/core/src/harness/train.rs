//! Two-stage training: a task-guided pre-training stage followed by a
//! fine-tuning stage with the semantic secondary head.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use log::info;

use crate::data::{augment, Batch, DataRng, Dataset, RgbdSample};
use crate::decoder::TaskKind;
use crate::error::{data_err, Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::{StageConfig, TrainConfig};
use crate::harness::eval::evaluate;
use crate::harness::optim::Adam;
use crate::losses::{
    depth_loss, median_frequency_weights, normal_loss, pyramid_loss, semantic_loss, ClassWeights, LossBreakdown,
    LossTerms,
};
use crate::metrics::SegMetrics;
use crate::model::{Adsd, ModelConfig, ENCODER, PRIMARY};
use crate::nn::{Mode, NormSettings, ParamStore, Session};
use crate::tensor::Var;

/// Stream salts separating the shuffling and augmentation sequences.
const SHUFFLE_SALT: u64 = 0x5348_5546;
const AUGMENT_SALT: u64 = 0x4155_4735;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

/// Which stages a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageSelect {
    Pretrain,
    Finetune,
    Both,
}

impl std::str::FromStr for StageSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(StageSelect::Pretrain),
            "finetune" => Ok(StageSelect::Finetune),
            "both" => Ok(StageSelect::Both),
            other => Err(Error::Usage(format!("unknown stage `{other}` (pretrain|finetune|both)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochRow {
    /// 1-based, counted across stages.
    pub epoch: usize,
    pub stage: Stage,
    pub lr: f64,
    pub losses: LossBreakdown,
    pub val: Option<SegMetrics>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub side_outputs: usize,
    pub rows: Vec<EpochRow>,
    /// Wall-clock seconds per row; kept out of the CSV so reports are
    /// reproducible byte for byte.
    pub seconds: Vec<f64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainReport {
    pub fn header(side_outputs: usize) -> String {
        let mut h = String::from("epoch,stage,lr,L,L_S,L_T");
        for k in 1..=side_outputs {
            let _ = write!(h, ",L_P{k}");
        }
        h.push_str(",val_pixacc,val_macc,val_miou");
        h
    }

    pub fn to_csv(&self) -> String {
        let mut s = Self::header(self.side_outputs) + "\n";
        for r in &self.rows {
            let l = &r.losses;
            let _ = write!(s, "{},{},{},{},{},{}", r.epoch, r.stage.as_str(), r.lr, l.total, l.semantic, l.task);
            for p in &l.pyramid {
                let _ = write!(s, ",{p}");
            }
            let m = r.val.as_ref();
            let _ = writeln!(
                s,
                ",{},{},{}",
                cell(m.map(|m| m.pixacc)),
                cell(m.map(|m| m.macc)),
                cell(m.map(|m| m.miou))
            );
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("epoch,seconds\n");
        for (r, t) in self.rows.iter().zip(&self.seconds) {
            let _ = writeln!(s, "{},{t:.3}", r.epoch);
        }
        s
    }

    pub fn last_val(&self) -> Option<&SegMetrics> {
        self.rows.last().and_then(|r| r.val.as_ref())
    }
}

/// Loss of one batch under the model's secondary head.
pub fn batch_losses(
    model: &Adsd,
    s: &mut Session<'_, f32>,
    batch: &Batch<f32>,
    weights: &ClassWeights,
) -> Result<(Var, LossBreakdown)> {
    let rgb = s.input(batch.rgb.clone());
    let depth = s.input(batch.depth.clone());
    let out = model.forward(s, rgb, depth, true)?;
    let semantic = semantic_loss(&mut s.tape, out.logits(), &batch.labels, weights)?;
    let task = match (&out.secondary, model.config.secondary) {
        (Some(sec), Some(kind)) => Some(match kind {
            TaskKind::Semantic => semantic_loss(&mut s.tape, sec.head, &batch.labels, weights)?,
            TaskKind::Depth => depth_loss(&mut s.tape, sec.head, &batch.depth, &batch.depth_valid)?,
            TaskKind::Normal => {
                let normals = batch
                    .normals
                    .as_ref()
                    .ok_or_else(|| data_err!("normal-guided training needs surface normals in the dataset"))?;
                normal_loss(&mut s.tape, sec.head, normals, &batch.depth_valid)?
            }
        }),
        _ => None,
    };
    let pyramid = pyramid_loss(
        &mut s.tape,
        &out.primary.side_outputs,
        &batch.labels,
        (batch.height, batch.width),
        weights,
    )?;
    LossTerms {
        semantic,
        task,
        pyramid,
    }
    .total(&mut s.tape)
}

/// Training and validation data plus the class weights derived from the
/// training manifest.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub weights: ClassWeights,
}

impl<'a> TrainData<'a> {
    pub fn new(train: &'a Dataset, val: Option<&'a Dataset>, classes: usize) -> Result<Self> {
        if train.is_empty() {
            return Err(data_err!("training set {} has no samples", train.root.display()));
        }
        for d in std::iter::once(train).chain(val) {
            if d.manifest.num_classes() != classes {
                return Err(data_err!(
                    "dataset {} has {} classes, model expects {classes}",
                    d.root.display(),
                    d.manifest.num_classes()
                ));
            }
        }
        let weights = median_frequency_weights(&train.manifest.histogram)?;
        Ok(TrainData { train, val, weights })
    }
}

fn shuffled(n: usize, rng: &mut DataRng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        order.swap(i, j);
    }
    order
}

/// Trains `store` for one stage, appending rows to `report`.
pub fn train_stage(
    cfg: &TrainConfig,
    stage: Stage,
    stage_cfg: &StageConfig,
    model: &Adsd,
    store: &mut ParamStore<f32>,
    data: &TrainData<'_>,
    report: &mut TrainReport,
) -> Result<()> {
    let mut adam = Adam::new(cfg.beta1, cfg.beta2, cfg.adam_eps);
    let norm = NormSettings::default();
    for e in 0..stage_cfg.epochs {
        let start = Instant::now();
        let epoch = report.rows.len() + 1;
        let lr = stage_cfg.lr_at(e);
        let order = shuffled(data.train.len(), &mut DataRng::new(cfg.seed ^ SHUFFLE_SALT, epoch as u64));
        let mut aug_rng = DataRng::new(cfg.seed ^ AUGMENT_SALT, epoch as u64);
        let mut batches = Vec::new();
        for chunk in order.chunks(cfg.batch_size) {
            let owned: Vec<RgbdSample> = if cfg.augment {
                chunk
                    .iter()
                    .map(|&i| augment(&data.train.samples[i], &mut aug_rng))
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| data.train.samples[i].clone()).collect()
            };
            let refs: Vec<&RgbdSample> = owned.iter().collect();
            let batch = Batch::<f32>::from_samples(&refs)?;
            let mut s = Session::new(store, Mode::Train, norm);
            let (loss, breakdown) = batch_losses(model, &mut s, &batch, &data.weights)?;
            let grads = s.backward(loss)?;
            adam.step(store, &grads, lr);
            batches.push(breakdown);
        }
        let losses = LossBreakdown::mean(&batches).expect("non-empty training set");
        let val = match data.val {
            Some(v) if !v.is_empty() => Some(evaluate(model, store, v, cfg.batch_size)?.1),
            _ => None,
        };
        let secs = start.elapsed().as_secs_f64();
        info!(
            "{} epoch {epoch}: L={:.4} L_S={:.4} L_T={:.4}{} ({secs:.1}s)",
            stage.as_str(),
            losses.total,
            losses.semantic,
            losses.task,
            val.as_ref().map(|m| format!(" val mIoU={:.4}", m.miou)).unwrap_or_default()
        );
        report.rows.push(EpochRow {
            epoch,
            stage,
            lr,
            losses,
            val,
        });
        report.seconds.push(secs);
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Adsd,
    pub store: ParamStore<f32>,
    /// Encoder and primary-decoder checksums at the end of pre-training and
    /// right before the first fine-tuning step.
    pub boundary_checksums: Option<(u64, u64)>,
    /// Pre-trained model when both stages ran.
    pub pretrained: Option<(Adsd, ParamStore<f32>)>,
}

fn build(model_cfg: &ModelConfig, seed: u64) -> Result<(Adsd, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let model = Adsd::new(model_cfg, &mut store, seed)?;
    Ok((model, store))
}

/// Runs the selected stages. With `StageSelect::Finetune`, `resume` must
/// hold the pre-trained parameters.
pub fn run_training(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    stages: StageSelect,
    resume: Option<&ParamStore<f32>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut report = TrainReport {
        side_outputs: cfg.model.side_outputs,
        rows: Vec::new(),
        seconds: Vec::new(),
    };
    let pretrained = match stages {
        StageSelect::Finetune => None,
        _ => {
            let (model, mut store) = build(&cfg.stage_model(&cfg.pretrain), cfg.seed)?;
            train_stage(cfg, Stage::Pretrain, &cfg.pretrain, &model, &mut store, data, &mut report)?;
            Some((model, store))
        }
    };
    if stages == StageSelect::Pretrain {
        let (model, store) = pretrained.expect("pre-training ran");
        return Ok(TrainOutcome {
            report,
            model,
            store,
            boundary_checksums: None,
            pretrained: None,
        });
    }
    let source = match (&pretrained, resume) {
        (Some((_, s)), _) => s,
        (None, Some(s)) => s,
        (None, None) => return Err(Error::Usage("fine-tuning alone needs pre-trained parameters".into())),
    };
    let (model, mut store) = build(&cfg.stage_model(&cfg.finetune), cfg.seed)?;
    store.copy_matching(source);
    let before = source.checksum(&[ENCODER, PRIMARY]);
    let after = store.checksum(&[ENCODER, PRIMARY]);
    if before != after {
        return Err(Error::CheckFailed(
            "encoder/primary parameters changed across the stage boundary".into(),
        ));
    }
    train_stage(cfg, Stage::Finetune, &cfg.finetune, &model, &mut store, data, &mut report)?;
    Ok(TrainOutcome {
        report,
        model,
        store,
        boundary_checksums: Some((before, after)),
        pretrained,
    })
}

/// Writes the resolved configuration, report, timing sidecar and final
/// checkpoint of a run into `out`.
pub fn write_run(out: &Path, cfg: &TrainConfig, outcome: &TrainOutcome, checkpoint_name: &str) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let write = |name: &str, text: &str| {
        let path = out.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write("config.txt", &cfg.to_text())?;
    write("report.csv", &outcome.report.to_csv())?;
    write("timing.csv", &outcome.report.timing_csv())?;
    if let Some((model, store)) = &outcome.pretrained {
        checkpoint::save(&out.join(Stage::Pretrain.as_str()), &model.config, store)?;
    }
    checkpoint::save(&out.join(checkpoint_name), &outcome.model.config, &outcome.store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_is_a_permutation() {
        let mut o = shuffled(50, &mut DataRng::new(1, 1));
        o.sort();
        assert_eq!(o, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn header_lists_side_outputs() {
        assert_eq!(
            TrainReport::header(2),
            "epoch,stage,lr,L,L_S,L_T,L_P1,L_P2,val_pixacc,val_macc,val_miou"
        );
    }
}
