//! Channel attention, spatial attention and the per-scale multi-modal
//! fusion block that combines paired RGB and depth features.

use std::fmt;
use std::str::FromStr;

use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{Conv2d, ParamBuilder, Session};
use crate::tensor::{ConvSpec, Element, Var};

/// How the two modality streams are combined at each scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionVariant {
    /// Plain element-wise sum.
    Summation,
    ChannelAttention,
    SpatialAttention,
}

impl FusionVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionVariant::Summation => "summation",
            FusionVariant::ChannelAttention => "channel",
            FusionVariant::SpatialAttention => "spatial",
        }
    }
}

impl fmt::Display for FusionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "summation" | "sum" => Ok(FusionVariant::Summation),
            "channel" | "channel_attention" => Ok(FusionVariant::ChannelAttention),
            "spatial" | "spatial_attention" => Ok(FusionVariant::SpatialAttention),
            other => Err(config_err!("unknown fusion variant `{other}`")),
        }
    }
}

/// Where attention sits relative to the cross-modal sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionOrder {
    /// Recalibrate each modality with its own attention, then sum.
    PerModality,
    /// Sum first, then apply one attention block to the sum.
    AfterSum,
}

impl FusionOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            FusionOrder::PerModality => "per_modality",
            FusionOrder::AfterSum => "after_sum",
        }
    }
}

impl FromStr for FusionOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_modality" => Ok(FusionOrder::PerModality),
            "after_sum" => Ok(FusionOrder::AfterSum),
            other => Err(config_err!("unknown fusion order `{other}`")),
        }
    }
}

/// Squeeze-and-excitation style gating: pool → 1×1 (C→C/r) → ReLU →
/// 1×1 (C/r→C) → sigmoid, then a per-channel rescale of the input.
#[derive(Debug, Clone)]
pub struct ChannelAttention {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(config_err!(
                "channel attention: {channels} channels not divisible by reduction ratio {reduction}"
            ));
        }
        let hidden = channels / reduction;
        let reduce = Conv2d::new(&mut b.scope("reduce"), ConvSpec::new(channels, hidden, 1), true)?;
        let expand = Conv2d::new(&mut b.scope("expand"), ConvSpec::new(hidden, channels, 1), true)?;
        Ok(ChannelAttention {
            reduce,
            expand,
            channels,
            reduction,
        })
    }

    /// The `N×C×1×1` gate σ(Ẑ).
    pub fn gate<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let z = s.tape.global_avg_pool(u)?;
        let h = self.reduce.forward(s, z)?;
        let h = s.tape.relu(h)?;
        let zhat = self.expand.forward(s, h)?;
        s.tape.sigmoid(zhat)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let g = self.gate(s, u)?;
        s.tape.mul_channelwise(u, g)
    }
}

/// 1×1 projection to a single channel → sigmoid, then a per-location
/// rescale shared across channels.
#[derive(Debug, Clone)]
pub struct SpatialAttention {
    pub project: Conv2d,
}

impl SpatialAttention {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, channels: usize) -> Result<Self> {
        let project = Conv2d::new(&mut b.scope("project"), ConvSpec::new(channels, 1, 1), true)?;
        Ok(SpatialAttention { project })
    }

    /// The `N×1×H×W` gate σ(Q).
    pub fn gate<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let q = self.project.forward(s, u)?;
        s.tape.sigmoid(q)
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        let g = self.gate(s, u)?;
        s.tape.mul_pixelwise(u, g)
    }
}

#[derive(Debug, Clone)]
pub enum Attention {
    Channel(ChannelAttention),
    Spatial(SpatialAttention),
}

impl Attention {
    fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        variant: FusionVariant,
        channels: usize,
        reduction: usize,
    ) -> Result<Option<Self>> {
        Ok(match variant {
            FusionVariant::Summation => None,
            FusionVariant::ChannelAttention => Some(Attention::Channel(ChannelAttention::new(
                &mut b.scope("channel_attention"),
                channels,
                reduction,
            )?)),
            FusionVariant::SpatialAttention => Some(Attention::Spatial(SpatialAttention::new(
                &mut b.scope("spatial_attention"),
                channels,
            )?)),
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, u: Var) -> Result<Var> {
        match self {
            Attention::Channel(a) => a.forward(s, u),
            Attention::Spatial(a) => a.forward(s, u),
        }
    }
}

/// Fusion block for one scale. Each scale owns its parameters.
#[derive(Debug, Clone)]
pub struct Amf {
    pub variant: FusionVariant,
    pub order: FusionOrder,
    pub rgb: Option<Attention>,
    pub depth: Option<Attention>,
    pub fused: Option<Attention>,
}

impl Amf {
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        variant: FusionVariant,
        order: FusionOrder,
        channels: usize,
        reduction: usize,
    ) -> Result<Self> {
        let (rgb, depth, fused) = match order {
            FusionOrder::PerModality => (
                Attention::new(&mut b.scope("rgb"), variant, channels, reduction)?,
                Attention::new(&mut b.scope("depth"), variant, channels, reduction)?,
                None,
            ),
            FusionOrder::AfterSum => (
                None,
                None,
                Attention::new(&mut b.scope("fused"), variant, channels, reduction)?,
            ),
        };
        Ok(Amf {
            variant,
            order,
            rgb,
            depth,
            fused,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, rgb: Var, depth: Var) -> Result<Var> {
        if s.tape.shape(rgb) != s.tape.shape(depth) {
            return Err(dim_err!(
                "fusion inputs differ: rgb {:?}, depth {:?}",
                s.tape.shape(rgb),
                s.tape.shape(depth)
            ));
        }
        let r = match &self.rgb {
            Some(a) => a.forward(s, rgb)?,
            None => rgb,
        };
        let d = match &self.depth {
            Some(a) => a.forward(s, depth)?,
            None => depth,
        };
        let sum = s.tape.add(r, d)?;
        match &self.fused {
            Some(a) => a.forward(s, sum),
            None => Ok(sum),
        }
    }
}
