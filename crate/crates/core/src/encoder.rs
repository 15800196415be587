//! Two-stream residual backbone with per-scale fusion.

use crate::attention::{Amf, FusionOrder, FusionVariant};
use crate::error::{config_err, dim_err, Result};
use crate::nn::{ConvBn, ParamBuilder, Session};
use crate::tensor::{ConvSpec, Element, Var};

/// Number of backbone scales (strides 2, 4, 8, 16, 32).
pub const SCALES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneConfig {
    pub stage_channels: [usize; SCALES],
    pub blocks_per_stage: [usize; SCALES],
    /// Bottleneck width is `out_channels / expansion`.
    pub expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [16, 32, 64, 128, 256],
            blocks_per_stage: [1, 1, 1, 1, 1],
            expansion: 4,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.blocks_per_stage.contains(&0) || self.expansion == 0 {
            return Err(config_err!("backbone channel, block and expansion counts must be positive: {self:?}"));
        }
        Ok(())
    }

    /// Stride of stage `k` relative to the input.
    pub fn stride(k: usize) -> usize {
        2 << k
    }
}

/// 1×1 reduce → 3×3 (carries the stride) → 1×1 expand, plus a projected
/// shortcut when the shape changes.
#[derive(Debug, Clone)]
pub struct Bottleneck {
    pub reduce: ConvBn,
    pub conv: ConvBn,
    pub expand: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl Bottleneck {
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        cin: usize,
        cout: usize,
        stride: usize,
        expansion: usize,
    ) -> Result<Self> {
        let mid = (cout / expansion).max(1);
        let reduce = ConvBn::new(&mut b.scope("reduce"), ConvSpec::new(cin, mid, 1), true)?;
        let conv = ConvBn::new(&mut b.scope("conv"), ConvSpec::new(mid, mid, 3).stride(stride).padding(1), true)?;
        let expand = ConvBn::new(&mut b.scope("expand"), ConvSpec::new(mid, cout, 1), false)?;
        let shortcut = if cin != cout || stride != 1 {
            Some(ConvBn::new(
                &mut b.scope("shortcut"),
                ConvSpec::new(cin, cout, 1).stride(stride),
                false,
            )?)
        } else {
            None
        };
        Ok(Bottleneck {
            reduce,
            conv,
            expand,
            shortcut,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let y = self.reduce.forward(s, x)?;
        let y = self.conv.forward(s, y)?;
        let y = self.expand.forward(s, y)?;
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(s, x)?,
            None => x,
        };
        let sum = s.tape.add(y, skip)?;
        s.tape.relu(sum)
    }
}

/// One modality stream. Stage 0 starts with a strided 3×3 stem; every later
/// stage opens with a strided bottleneck.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub in_channels: usize,
    pub stem: ConvBn,
    pub stages: Vec<Vec<Bottleneck>>,
}

impl Backbone {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, in_channels: usize, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.stage_channels;
        let stem = ConvBn::new(
            &mut b.scope("stem"),
            ConvSpec::new(in_channels, c[0], 3).stride(2).padding(1),
            true,
        )?;
        let mut stages = Vec::with_capacity(SCALES);
        for k in 0..SCALES {
            let mut blocks = Vec::new();
            for i in 0..config.blocks_per_stage[k] {
                let (cin, stride) = match (k, i) {
                    (0, _) => (c[0], 1),
                    (_, 0) => (c[k - 1], 2),
                    _ => (c[k], 1),
                };
                blocks.push(Bottleneck::new(
                    &mut b.scope(&format!("stage{k}.block{i}")),
                    cin,
                    c[k],
                    stride,
                    config.expansion,
                )?);
            }
            stages.push(blocks);
        }
        Ok(Backbone {
            in_channels,
            stem,
            stages,
        })
    }

    /// Features at strides 2, 4, 8, 16, 32.
    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, image: Var) -> Result<Vec<Var>> {
        let (_, c, h, w) = s.value(image).dims4()?;
        if c != self.in_channels {
            return Err(dim_err!("backbone expects {} input channels, got {c}", self.in_channels));
        }
        let div = BackboneConfig::stride(SCALES - 1);
        if h % div != 0 || w % div != 0 {
            return Err(config_err!("input {h}x{w} is not divisible by {div}"));
        }
        let mut x = self.stem.forward(s, image)?;
        let mut features = Vec::with_capacity(SCALES);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(s, x)?;
            }
            features.push(x);
        }
        Ok(features)
    }
}

/// Fuse0 … Fuse4, finest first.
#[derive(Debug, Clone)]
pub struct FusedPyramid {
    pub levels: Vec<Var>,
}

/// Everything the encoder computed, including the per-stream features.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub pyramid: FusedPyramid,
    pub rgb: Vec<Var>,
    pub depth: Vec<Var>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub rgb: Backbone,
    pub depth: Backbone,
    pub fusion: Vec<Amf>,
}

impl Encoder {
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        config: &BackboneConfig,
        variant: FusionVariant,
        order: FusionOrder,
        reduction: usize,
    ) -> Result<Self> {
        let rgb = Backbone::new(&mut b.scope("rgb"), 3, config)?;
        let depth = Backbone::new(&mut b.scope("depth"), 1, config)?;
        let fusion = (0..SCALES)
            .map(|k| {
                Amf::new(
                    &mut b.scope(&format!("fuse{k}")),
                    variant,
                    order,
                    config.stage_channels[k],
                    reduction,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { rgb, depth, fusion })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, rgb: Var, depth: Var) -> Result<EncoderOutput> {
        let (rn, _, rh, rw) = s.value(rgb).dims4()?;
        let (dn, _, dh, dw) = s.value(depth).dims4()?;
        if (rn, rh, rw) != (dn, dh, dw) {
            return Err(dim_err!(
                "rgb {:?} and depth {:?} are not aligned",
                s.tape.shape(rgb),
                s.tape.shape(depth)
            ));
        }
        let rgb_f = self.rgb.forward(s, rgb)?;
        let depth_f = self.depth.forward(s, depth)?;
        let levels = self
            .fusion
            .iter()
            .zip(rgb_f.iter().zip(&depth_f))
            .map(|(amf, (&r, &d))| amf.forward(s, r, d))
            .collect::<Result<_>>()?;
        Ok(EncoderOutput {
            pyramid: FusedPyramid { levels },
            rgb: rgb_f,
            depth: depth_f,
        })
    }
}
