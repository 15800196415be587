//! Line-oriented `key = value` run configuration.
//!
//! Keys are dotted (`model.fusion`, `pretrain.lr`); a `[section]` line
//! prefixes the keys that follow it. `#` starts a comment. Unknown or
//! repeated keys are errors. [`TrainConfig::to_text`] writes every key,
//! and parsing that text gives back the same configuration.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::attention::{FusionOrder, FusionVariant};
use crate::decoder::{AsppConfig, TaskKind};
use crate::encoder::{BackboneConfig, SCALES};
use crate::error::{config_err, Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Secondary head trained in this stage; `None` trains without the
    /// secondary branch.
    pub head: Option<TaskKind>,
    /// The learning rate is multiplied by `lr_gamma` every `lr_step` epochs.
    pub lr_step: usize,
    pub lr_gamma: f64,
}

impl StageConfig {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step.max(1)) as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub augment: bool,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    /// Architecture; its `secondary` field is replaced by each stage's head.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            batch_size: 4,
            augment: true,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            pretrain: StageConfig {
                lr: 2e-4,
                epochs: 60,
                head: Some(TaskKind::Normal),
                lr_step: 30,
                lr_gamma: 0.1,
            },
            finetune: StageConfig {
                lr: 2e-5,
                epochs: 5,
                head: Some(TaskKind::Semantic),
                lr_step: 30,
                lr_gamma: 0.1,
            },
            model: ModelConfig::default(),
        }
    }
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn head_str(h: Option<TaskKind>) -> &'static str {
    h.map_or("none", TaskKind::as_str)
}

impl TrainConfig {
    /// Model used in a stage: the configured architecture with that
    /// stage's secondary head.
    pub fn stage_model(&self, stage: &StageConfig) -> ModelConfig {
        ModelConfig {
            secondary: stage.head,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("batch_size must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        for (name, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            if !(s.lr > 0.0 && s.lr.is_finite()) {
                return Err(config_err!("{name}.lr must be positive"));
            }
            if s.lr_step == 0 {
                return Err(config_err!("{name}.lr_step must be positive"));
            }
        }
        self.model.validate()
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let b = &m.backbone;
        let aspp = m.aspp.clone().unwrap_or_else(AsppConfig::desk);
        let mut lines = vec![
            format!("seed = {}", self.seed),
            format!("batch_size = {}", self.batch_size),
            format!("augment = {}", self.augment),
            format!("optimizer.beta1 = {}", self.beta1),
            format!("optimizer.beta2 = {}", self.beta2),
            format!("optimizer.eps = {}", self.adam_eps),
        ];
        for (name, s) in [("pretrain", &self.pretrain), ("finetune", &self.finetune)] {
            lines.push(format!("{name}.lr = {}", s.lr));
            lines.push(format!("{name}.epochs = {}", s.epochs));
            lines.push(format!("{name}.head = {}", head_str(s.head)));
            lines.push(format!("{name}.lr_step = {}", s.lr_step));
            lines.push(format!("{name}.lr_gamma = {}", s.lr_gamma));
        }
        lines.extend(model_lines(m, b, &aspp));
        lines.join("\n") + "\n"
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::parse(text)?;
        let mut c = TrainConfig::default();
        kv.take("seed", &mut c.seed)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("augment", &mut c.augment)?;
        kv.take("optimizer.beta1", &mut c.beta1)?;
        kv.take("optimizer.beta2", &mut c.beta2)?;
        kv.take("optimizer.eps", &mut c.adam_eps)?;
        let explicit_finetune_lr = kv.contains("finetune.lr");
        for (name, s) in [("pretrain", &mut c.pretrain), ("finetune", &mut c.finetune)] {
            kv.take(&format!("{name}.lr"), &mut s.lr)?;
            kv.take(&format!("{name}.epochs"), &mut s.epochs)?;
            kv.take_with(&format!("{name}.head"), &mut s.head, parse_head)?;
            kv.take(&format!("{name}.lr_step"), &mut s.lr_step)?;
            kv.take(&format!("{name}.lr_gamma"), &mut s.lr_gamma)?;
        }
        if !explicit_finetune_lr {
            c.finetune.lr = c.pretrain.lr / 10.0;
        }
        c.model = parse_model(&mut kv)?;
        kv.finish()?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn parse_head(s: &str) -> Result<Option<TaskKind>> {
    match s {
        "none" => Ok(None),
        other => other.parse().map(Some),
    }
}

pub(crate) fn model_lines(m: &ModelConfig, b: &BackboneConfig, aspp: &AsppConfig) -> Vec<String> {
    vec![
        format!("model.classes = {}", m.num_classes),
        format!("model.stage_channels = {}", list(&b.stage_channels)),
        format!("model.blocks_per_stage = {}", list(&b.blocks_per_stage)),
        format!("model.expansion = {}", b.expansion),
        format!("model.fusion = {}", m.fusion),
        format!("model.fusion_order = {}", m.fusion_order.as_str()),
        format!("model.reduction = {}", m.reduction),
        format!("model.decoder_width = {}", m.decoder_width),
        format!("model.aspp = {}", m.aspp.is_some()),
        format!("model.aspp_level = {}", m.aspp_level),
        format!("model.aspp_rates = {}", list(&aspp.rates)),
        format!("model.aspp_channels = {}", aspp.branch_channels),
        format!("model.aspp_one_by_one = {}", aspp.one_by_one),
        format!("model.aspp_pooling = {}", aspp.image_pooling),
        format!("model.side_outputs = {}", m.side_outputs),
        format!("model.secondary = {}", head_str(m.secondary)),
        format!("model.use_depth = {}", m.use_depth),
    ]
}

/// Serialises a model configuration alone (used in checkpoints).
pub fn model_to_text(m: &ModelConfig) -> String {
    let aspp = m.aspp.clone().unwrap_or_else(AsppConfig::desk);
    model_lines(m, &m.backbone, &aspp).join("\n") + "\n"
}

pub fn model_from_text(text: &str) -> Result<ModelConfig> {
    let mut kv = KeyValues::parse(text)?;
    let m = parse_model(&mut kv)?;
    kv.finish()?;
    m.validate()?;
    Ok(m)
}

fn parse_array(s: &str) -> Result<[usize; SCALES]> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>().map_err(|_| config_err!("`{x}` is not a count")))
        .collect::<Result<_>>()?;
    v.try_into()
        .map_err(|v: Vec<usize>| config_err!("expected {SCALES} comma-separated values, got {}", v.len()))
}

fn parse_model(kv: &mut KeyValues) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    let mut aspp = m.aspp.clone().expect("default has ASPP");
    let mut use_aspp = true;
    kv.take("model.classes", &mut m.num_classes)?;
    kv.take_with("model.stage_channels", &mut m.backbone.stage_channels, parse_array)?;
    kv.take_with("model.blocks_per_stage", &mut m.backbone.blocks_per_stage, parse_array)?;
    kv.take("model.expansion", &mut m.backbone.expansion)?;
    kv.take_with("model.fusion", &mut m.fusion, FusionVariant::from_str)?;
    kv.take_with("model.fusion_order", &mut m.fusion_order, FusionOrder::from_str)?;
    kv.take("model.reduction", &mut m.reduction)?;
    kv.take("model.decoder_width", &mut m.decoder_width)?;
    kv.take("model.aspp", &mut use_aspp)?;
    kv.take("model.aspp_level", &mut m.aspp_level)?;
    kv.take_with("model.aspp_rates", &mut aspp.rates, |s| {
        s.split(',')
            .map(|x| x.trim().parse::<usize>().map_err(|_| config_err!("`{x}` is not a rate")))
            .collect()
    })?;
    kv.take("model.aspp_channels", &mut aspp.branch_channels)?;
    kv.take("model.aspp_one_by_one", &mut aspp.one_by_one)?;
    kv.take("model.aspp_pooling", &mut aspp.image_pooling)?;
    kv.take("model.side_outputs", &mut m.side_outputs)?;
    kv.take_with("model.secondary", &mut m.secondary, parse_head)?;
    kv.take("model.use_depth", &mut m.use_depth)?;
    m.aspp = use_aspp.then_some(aspp);
    Ok(m)
}

/// Raw key/value pairs with their line numbers; keys are consumed as they
/// are read so leftovers can be reported.
struct KeyValues {
    entries: BTreeMap<String, (usize, String)>,
}

impl KeyValues {
    fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        let mut section = String::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected `key = value`, found `{line}`", n + 1))?;
            let key = match section.as_str() {
                "" => key.trim().to_string(),
                s => format!("{s}.{}", key.trim()),
            };
            if entries.insert(key.clone(), (n + 1, value.trim().to_string())).is_some() {
                return Err(config_err!("line {}: key `{key}` given twice", n + 1));
            }
        }
        Ok(KeyValues { entries })
    }

    fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    fn take_with<V>(&mut self, key: &str, slot: &mut V, parse: impl FnOnce(&str) -> Result<V>) -> Result<()> {
        if let Some((line, value)) = self.entries.remove(key) {
            *slot = parse(&value).map_err(|e| config_err!("line {line}: `{key}`: {e}"))?;
        }
        Ok(())
    }

    fn take<V: FromStr>(&mut self, key: &str, slot: &mut V) -> Result<()> {
        self.take_with(key, slot, |s| {
            s.parse::<V>().map_err(|_| config_err!("cannot parse `{s}`"))
        })
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            Some((key, (line, _))) => Err(config_err!("line {line}: unknown key `{key}`")),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&c.to_text()).unwrap(), c);
        let mut d = c.clone();
        d.model.aspp = None;
        d.pretrain.head = None;
        d.model.fusion = FusionVariant::SpatialAttention;
        assert_eq!(TrainConfig::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn sections_comments_and_defaults() {
        let c = TrainConfig::parse("# run\n[pretrain]\nlr = 0.001 # faster\nepochs=3\n[model]\nfusion = summation\n").unwrap();
        assert_eq!(c.pretrain.lr, 0.001);
        assert_eq!(c.finetune.lr, 0.0001);
        assert_eq!(c.pretrain.epochs, 3);
        assert_eq!(c.model.fusion, FusionVariant::Summation);
    }

    #[test]
    fn unknown_and_duplicate_keys_fail() {
        assert!(matches!(TrainConfig::parse("pretrain.lrr = 1"), Err(Error::Config(_))));
        assert!(TrainConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(TrainConfig::parse("seed").is_err());
        assert!(TrainConfig::parse("model.stage_channels = 1,2,3").is_err());
    }

    #[test]
    fn step_schedule() {
        let s = TrainConfig::default().pretrain;
        assert_eq!(s.lr_at(0), 2e-4);
        assert!((s.lr_at(30) - 2e-5).abs() < 1e-18);
    }
}
