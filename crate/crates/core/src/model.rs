//! Full network: two-stream encoder, primary decoder and optional
//! task-guided secondary decoder.

use crate::attention::{FusionOrder, FusionVariant};
use crate::decoder::{AsppConfig, BranchOutput, DecoderBranch, TaskKind, MAX_SIDE_OUTPUTS};
use crate::encoder::{BackboneConfig, Encoder, EncoderOutput, SCALES};
use crate::error::{config_err, Result};
use crate::nn::{ParamBuilder, ParamStore, Session};
use crate::tensor::{Element, Tensor, Var};

/// Parameter name prefixes of the three top-level components.
pub const ENCODER: &str = "encoder.";
pub const PRIMARY: &str = "primary.";
pub const SECONDARY: &str = "secondary.";

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub backbone: BackboneConfig,
    pub fusion: FusionVariant,
    pub fusion_order: FusionOrder,
    pub reduction: usize,
    /// Channel width every fused level is projected to in the decoder.
    pub decoder_width: usize,
    /// `None` removes the ASPP block.
    pub aspp: Option<AsppConfig>,
    /// Fused level (0 = Fuse0) after which ASPP is applied.
    pub aspp_level: usize,
    pub side_outputs: usize,
    /// Head of the secondary branch; `None` gives the single-decoder model.
    pub secondary: Option<TaskKind>,
    /// When false the depth stream sees an all-zero image.
    pub use_depth: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_classes: 4,
            backbone: BackboneConfig::default(),
            fusion: FusionVariant::ChannelAttention,
            fusion_order: FusionOrder::PerModality,
            reduction: 4,
            decoder_width: 64,
            aspp: Some(AsppConfig::desk()),
            aspp_level: 0,
            side_outputs: MAX_SIDE_OUTPUTS,
            secondary: Some(TaskKind::Normal),
            use_depth: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(config_err!("need at least 2 classes, got {}", self.num_classes));
        }
        self.backbone.validate()?;
        if self.reduction == 0 {
            return Err(config_err!("reduction ratio must be positive"));
        }
        if self.side_outputs > MAX_SIDE_OUTPUTS {
            return Err(config_err!("at most {MAX_SIDE_OUTPUTS} side outputs"));
        }
        if self.aspp_level >= SCALES {
            return Err(config_err!("ASPP level {} out of range 0..{SCALES}", self.aspp_level));
        }
        if let Some(a) = &self.aspp {
            a.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdsdOutput {
    pub encoder: EncoderOutput,
    pub primary: BranchOutput,
    pub secondary: Option<BranchOutput>,
}

impl AdsdOutput {
    pub fn logits(&self) -> Var {
        self.primary.head
    }
}

#[derive(Debug, Clone)]
pub struct Adsd {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub primary: DecoderBranch,
    pub secondary: Option<DecoderBranch>,
}

impl Adsd {
    /// Builds the network and registers its parameters in `store`.
    pub fn new<T: Element>(config: &ModelConfig, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = ParamBuilder::new(store, seed);
        let encoder = Encoder::new(
            &mut b.scope("encoder"),
            &config.backbone,
            config.fusion,
            config.fusion_order,
            config.reduction,
        )?;
        let channels = config.backbone.stage_channels;
        let c = config.num_classes;
        let primary = DecoderBranch::new(
            &mut b.scope("primary"),
            &channels,
            config.decoder_width,
            config.aspp.as_ref().map(|a| (config.aspp_level, a)),
            config.side_outputs,
            c,
            "head",
            c,
        )?;
        let secondary = config
            .secondary
            .map(|kind| {
                DecoderBranch::new(
                    &mut b.scope("secondary"),
                    &channels,
                    config.decoder_width,
                    None,
                    0,
                    c,
                    &format!("head_{kind}"),
                    kind.out_channels(c),
                )
            })
            .transpose()?;
        Ok(Adsd {
            config: config.clone(),
            encoder,
            primary,
            secondary,
        })
    }

    /// Runs the encoder and the primary branch, plus the secondary branch
    /// when `with_secondary` is set and the model has one.
    pub fn forward<T: Element>(
        &self,
        s: &mut Session<'_, T>,
        rgb: Var,
        depth: Var,
        with_secondary: bool,
    ) -> Result<AdsdOutput> {
        let depth = if self.config.use_depth {
            depth
        } else {
            let zeros = Tensor::zeros(s.tape.shape(depth).to_vec());
            s.input(zeros)
        };
        let encoder = self.encoder.forward(s, rgb, depth)?;
        let primary = self.primary.forward(s, &encoder.pyramid)?;
        let secondary = match (&self.secondary, with_secondary) {
            (Some(branch), true) => Some(branch.forward(s, &encoder.pyramid)?),
            _ => None,
        };
        Ok(AdsdOutput {
            encoder,
            primary,
            secondary,
        })
    }

    /// Eval-mode logits from the primary branch only.
    pub fn predict<T: Element>(&self, store: &mut ParamStore<T>, rgb: Tensor<T>, depth: Tensor<T>) -> Result<Tensor<T>> {
        let mut s = Session::inference(store, Default::default());
        let rgb = s.input(rgb);
        let depth = s.input(depth);
        let out = self.forward(&mut s, rgb, depth, false)?;
        Ok(s.value(out.logits()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn secondary_head_named_by_task() {
        let mut store = ParamStore::<f32>::new();
        Adsd::new(&ModelConfig::default(), &mut store, 1).unwrap();
        assert!(store.by_name("secondary.head_normal.weight").is_some());
        assert!(store.iter().all(|(_, p)| p.name.starts_with(ENCODER)
            || p.name.starts_with(PRIMARY)
            || p.name.starts_with(SECONDARY)));
    }
}
