//! Single-scale evaluation through the primary decoder only.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{Batch, Dataset, RgbdSample};
use crate::error::{config_err, Error, Result};
use crate::harness::checkpoint;
use crate::losses::IGNORE_INDEX;
use crate::metrics::{argmax_labels, compute_metrics, per_class_csv, ConfusionMatrix, SegMetrics};
use crate::model::{Adsd, ModelConfig, ENCODER, PRIMARY};
use crate::nn::ParamStore;

/// Confusion matrix and metrics of `model` over a dataset.
pub fn evaluate(
    model: &Adsd,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    batch_size: usize,
) -> Result<(ConfusionMatrix, SegMetrics)> {
    let mut cm = ConfusionMatrix::new(model.config.num_classes);
    for chunk in data.samples.chunks(batch_size.max(1)) {
        let refs: Vec<&RgbdSample> = chunk.iter().collect();
        let batch = Batch::<f32>::from_samples(&refs)?;
        let logits = model.predict(store, batch.rgb, batch.depth)?;
        cm.accumulate(&argmax_labels(&logits)?, &batch.labels, IGNORE_INDEX)?;
    }
    let metrics = compute_metrics(&cm)?;
    Ok((cm, metrics))
}

/// Rebuilds the inference model of a checkpoint: the stored architecture
/// without its secondary branch, with encoder and primary parameters
/// loaded. Secondary-branch parameters in the checkpoint are ignored.
pub fn load_inference_model(dir: &Path) -> Result<(Adsd, ParamStore<f32>)> {
    let config = ModelConfig {
        secondary: None,
        ..checkpoint::load_model_config(dir)?
    };
    let saved = checkpoint::load_store::<f32>(dir)?;
    let mut store = ParamStore::new();
    let model = Adsd::new(&config, &mut store, 0)?;
    checkpoint::restore_into(&mut store, &saved, &[ENCODER, PRIMARY])?;
    Ok((model, store))
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub metrics: SegMetrics,
    pub class_names: Vec<String>,
}

impl EvalReport {
    pub fn summary_csv(&self) -> String {
        let m = &self.metrics;
        format!("metric,value\npixacc,{}\nmacc,{}\nmiou,{}\n", m.pixacc, m.macc, m.miou)
    }

    pub fn per_class_csv(&self) -> String {
        per_class_csv(&self.metrics, &self.class_names)
    }

    /// Path of the per-class table written next to `report`.
    pub fn per_class_path(report: &Path) -> PathBuf {
        let stem = report.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
        report.with_file_name(format!("{stem}_per_class.csv"))
    }

    pub fn write(&self, report: &Path) -> Result<()> {
        if let Some(parent) = report.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(report, self.summary_csv()).map_err(|e| Error::io(report, e))?;
        let per_class = Self::per_class_path(report);
        fs::write(&per_class, self.per_class_csv()).map_err(|e| Error::io(&per_class, e))
    }
}

pub fn run_eval(checkpoint_dir: &Path, data_dir: &Path) -> Result<EvalReport> {
    let (model, mut store) = load_inference_model(checkpoint_dir)?;
    let data = Dataset::load(data_dir)?;
    if data.manifest.num_classes() != model.config.num_classes {
        return Err(config_err!(
            "checkpoint predicts {} classes, dataset has {}",
            model.config.num_classes,
            data.manifest.num_classes()
        ));
    }
    let (_, metrics) = evaluate(&model, &mut store, &data, 8)?;
    Ok(EvalReport {
        metrics,
        class_names: data.manifest.class_names.clone(),
    })
}
