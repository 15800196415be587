//! Upsampling decoder branches: the primary segmentation branch with side
//! outputs and ASPP, and the task-guided secondary branch.

use std::fmt;
use std::str::FromStr;

use crate::encoder::{FusedPyramid, SCALES};
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{Conv2d, ConvBn, ParamBuilder, Session, UpBn};
use crate::tensor::{ConvSpec, Element, Var};

/// Maximum number of side outputs (strides 2, 4, 8, 16).
pub const MAX_SIDE_OUTPUTS: usize = SCALES - 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsppConfig {
    pub rates: Vec<usize>,
    pub branch_channels: usize,
    pub one_by_one: bool,
    pub image_pooling: bool,
}

impl AsppConfig {
    /// Rates for 64×64 inputs.
    pub fn desk() -> Self {
        AsppConfig {
            rates: vec![2, 4, 6],
            branch_channels: 32,
            one_by_one: true,
            image_pooling: true,
        }
    }

    /// Rates for 480×640 inputs.
    pub fn full_resolution() -> Self {
        AsppConfig {
            rates: vec![12, 24, 36],
            branch_channels: 256,
            one_by_one: true,
            image_pooling: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rates.contains(&0) {
            return Err(config_err!("ASPP rates must be at least 1: {:?}", self.rates));
        }
        if self.rates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("ASPP rates must be strictly increasing: {:?}", self.rates));
        }
        if self.branch_channels == 0 {
            return Err(config_err!("ASPP branch width must be positive"));
        }
        if self.rates.is_empty() && !self.one_by_one && !self.image_pooling {
            return Err(config_err!("ASPP needs at least one branch"));
        }
        Ok(())
    }

    fn branch_count(&self) -> usize {
        self.rates.len() + usize::from(self.one_by_one) + usize::from(self.image_pooling)
    }
}

/// Parallel dilated 3×3 branches (plus optional 1×1 and image-pooling
/// branches) concatenated and projected back by a 1×1 convolution.
#[derive(Debug, Clone)]
pub struct Aspp {
    pub config: AsppConfig,
    pub one_by_one: Option<ConvBn>,
    pub dilated: Vec<ConvBn>,
    pub pooling: Option<Conv2d>,
    pub project: ConvBn,
}

impl Aspp {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, config: &AsppConfig, channels: usize, out: usize) -> Result<Self> {
        config.validate()?;
        let bc = config.branch_channels;
        let one_by_one = if config.one_by_one {
            Some(ConvBn::new(&mut b.scope("branch1x1"), ConvSpec::new(channels, bc, 1), true)?)
        } else {
            None
        };
        let dilated = config
            .rates
            .iter()
            .map(|&r| ConvBn::new(&mut b.scope(&format!("rate{r}")), ConvSpec::same3x3(channels, bc, r), true))
            .collect::<Result<_>>()?;
        // A batch-normalized 1×1 map would have statistics over N values only.
        let pooling = if config.image_pooling {
            Some(Conv2d::new(&mut b.scope("pool"), ConvSpec::new(channels, bc, 1), true)?)
        } else {
            None
        };
        let project = ConvBn::new(
            &mut b.scope("project"),
            ConvSpec::new(bc * config.branch_count(), out, 1),
            true,
        )?;
        Ok(Aspp {
            config: config.clone(),
            one_by_one,
            dilated,
            pooling,
            project,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, x: Var) -> Result<Var> {
        let (_, _, h, w) = s.value(x).dims4()?;
        if let Some(&r) = self.config.rates.iter().find(|&&r| r >= h.min(w)) {
            return Err(config_err!(
                "ASPP rate {r} leaves no interior tap on a {h}x{w} feature map"
            ));
        }
        let mut parts = Vec::with_capacity(self.config.branch_count());
        if let Some(b) = &self.one_by_one {
            parts.push(b.forward(s, x)?);
        }
        for b in &self.dilated {
            parts.push(b.forward(s, x)?);
        }
        if let Some(p) = &self.pooling {
            let pooled = s.tape.global_avg_pool(x)?;
            let y = p.forward(s, pooled)?;
            let y = s.tape.relu(y)?;
            parts.push(s.tape.broadcast_spatial(y, h, w)?);
        }
        let cat = s.tape.concat_channels(&parts)?;
        self.project.forward(s, cat)
    }
}

/// What the secondary branch predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Semantic,
    Depth,
    Normal,
}

impl TaskKind {
    pub fn out_channels(self, num_classes: usize) -> usize {
        match self {
            TaskKind::Semantic => num_classes,
            TaskKind::Depth => 1,
            TaskKind::Normal => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Semantic => "semantic",
            TaskKind::Depth => "depth",
            TaskKind::Normal => "normal",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "semantic" => Ok(TaskKind::Semantic),
            "depth" => Ok(TaskKind::Depth),
            "normal" => Ok(TaskKind::Normal),
            other => Err(config_err!("unknown task head `{other}`")),
        }
    }
}

/// `W_{1×1}` projection of one fused level followed by the 2× upsampling
/// block `B_U`.
#[derive(Debug, Clone)]
pub struct UpsampleBlock {
    pub project: ConvBn,
    pub up: UpBn,
}

impl UpsampleBlock {
    pub fn new<T: Element>(b: &mut ParamBuilder<'_, T>, in_channels: usize, width: usize) -> Result<Self> {
        let project = ConvBn::new(&mut b.scope("project"), ConvSpec::new(in_channels, width, 1), true)?;
        let up = UpBn::new(&mut b.scope("upsample"), ConvSpec::new(width, width, 2).stride(2))?;
        Ok(UpsampleBlock { project, up })
    }
}

#[derive(Debug, Clone)]
pub struct BranchOutput {
    /// Full-resolution prediction of the branch head.
    pub head: Var,
    /// Side score maps, index `k-1` holding scale `k` (stride `2^k`).
    pub side_outputs: Vec<Var>,
    /// Upsampled feature maps `S_4 … S_0`, index `k` at stride `2^k`.
    pub features: Vec<Var>,
}

/// One decoder branch over the five fused levels.
///
/// Level `l` (stride `2^(l+1)`) is projected to the decoder width, summed
/// with the upsampled map coming from level `l+1`, and upsampled by its own
/// block: `S_4 = B_U(W·Fuse4)`, `S_l = B_U(S_{l+1} ⊕ W·Fuse_l)`. Side score
/// maps are read off `S_1 … S_K`; the head reads the full-resolution `S_0`.
#[derive(Debug, Clone)]
pub struct DecoderBranch {
    pub blocks: Vec<UpsampleBlock>,
    pub aspp: Option<(usize, Aspp)>,
    pub sides: Vec<Conv2d>,
    pub head: Conv2d,
}

impl DecoderBranch {
    pub fn new<T: Element>(
        b: &mut ParamBuilder<'_, T>,
        level_channels: &[usize; SCALES],
        width: usize,
        aspp: Option<(usize, &AsppConfig)>,
        side_outputs: usize,
        side_classes: usize,
        head_name: &str,
        head_channels: usize,
    ) -> Result<Self> {
        if side_outputs > MAX_SIDE_OUTPUTS {
            return Err(config_err!("at most {MAX_SIDE_OUTPUTS} side outputs, got {side_outputs}"));
        }
        if width == 0 {
            return Err(config_err!("decoder width must be positive"));
        }
        let blocks = (0..SCALES)
            .map(|l| UpsampleBlock::new(&mut b.scope(&format!("level{l}")), level_channels[l], width))
            .collect::<Result<_>>()?;
        let aspp = match aspp {
            Some((level, cfg)) if level < SCALES => Some((level, Aspp::new(&mut b.scope("aspp"), cfg, width, width)?)),
            Some((level, _)) => return Err(config_err!("ASPP level {level} out of range 0..{SCALES}")),
            None => None,
        };
        let sides = (1..=side_outputs)
            .map(|k| Conv2d::new(&mut b.scope(&format!("side{k}")), ConvSpec::new(width, side_classes, 1), true))
            .collect::<Result<_>>()?;
        let head = Conv2d::new(&mut b.scope(head_name), ConvSpec::new(width, head_channels, 1), true)?;
        Ok(DecoderBranch {
            blocks,
            aspp,
            sides,
            head,
        })
    }

    pub fn forward<T: Element>(&self, s: &mut Session<'_, T>, pyramid: &FusedPyramid) -> Result<BranchOutput> {
        if pyramid.levels.len() != SCALES {
            return Err(dim_err!("expected {SCALES} fused levels, got {}", pyramid.levels.len()));
        }
        let mut prev: Option<Var> = None;
        let mut features = Vec::with_capacity(SCALES);
        let mut side_outputs = vec![None; self.sides.len()];
        for level in (0..SCALES).rev() {
            let block = &self.blocks[level];
            let p = block.project.forward(s, pyramid.levels[level])?;
            let mut merged = match prev {
                Some(up) => {
                    if s.tape.shape(up) != s.tape.shape(p) {
                        return Err(config_err!(
                            "decoder level {level}: upsampled {:?} cannot be summed with projected {:?}",
                            s.tape.shape(up),
                            s.tape.shape(p)
                        ));
                    }
                    s.tape.add(up, p)?
                }
                None => p,
            };
            if let Some((_, aspp)) = self.aspp.as_ref().filter(|(l, _)| *l == level) {
                merged = aspp.forward(s, merged)?;
            }
            let up = block.up.forward(s, merged)?;
            if (1..=self.sides.len()).contains(&level) {
                side_outputs[level - 1] = Some(self.sides[level - 1].forward(s, up)?);
            }
            features.push(up);
            prev = Some(up);
        }
        let head = self.head.forward(s, prev.expect("at least one level"))?;
        Ok(BranchOutput {
            head,
            side_outputs: side_outputs.into_iter().map(|v| v.expect("side filled")).collect(),
            features,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn aspp_config_validation() {
        let mut c = AsppConfig::desk();
        assert!(c.validate().is_ok());
        c.rates = vec![4, 2];
        assert!(c.validate().is_err());
        c.rates = vec![0, 2];
        assert!(c.validate().is_err());
        c.rates = vec![];
        c.one_by_one = false;
        c.image_pooling = false;
        assert!(c.validate().is_err());
        assert_eq!(AsppConfig::full_resolution().rates, vec![12, 24, 36]);
    }

    #[test]
    fn task_head_channels() {
        assert_eq!(TaskKind::Depth.out_channels(7), 1);
        assert_eq!(TaskKind::Normal.out_channels(7), 3);
        assert_eq!(TaskKind::Semantic.out_channels(7), 7);
        assert_eq!("normal".parse::<TaskKind>().unwrap(), TaskKind::Normal);
        assert!("hha".parse::<TaskKind>().is_err());
    }
}
