//! Training objectives: median-frequency class weights, the weighted
//! semantic cross-entropy, berHu regression losses, pyramid supervision
//! and the unweighted total.

use crate::error::{data_err, dim_err, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: i32 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    /// `α_c = p_m / p_c`, zero for classes with no pixels.
    pub alpha: Vec<f64>,
    pub median_prob: f64,
    pub class_probs: Vec<f64>,
}

impl ClassWeights {
    pub fn uniform(classes: usize) -> Self {
        let p = 1.0 / classes as f64;
        ClassWeights {
            alpha: vec![1.0; classes],
            median_prob: p,
            class_probs: vec![p; classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    pub fn as_elements<T: Element>(&self) -> Vec<T> {
        self.alpha.iter().map(|&a| T::of(a)).collect()
    }
}

/// Median-frequency balancing from per-class pixel counts. With an even
/// number of present classes the lower of the two middle probabilities is
/// the median.
pub fn median_frequency_weights(histogram: &[u64]) -> Result<ClassWeights> {
    let total: u64 = histogram.iter().sum();
    if total == 0 {
        return Err(data_err!("class histogram has no pixels"));
    }
    let class_probs: Vec<f64> = histogram.iter().map(|&c| c as f64 / total as f64).collect();
    let mut present: Vec<f64> = class_probs.iter().copied().filter(|&p| p > 0.0).collect();
    present.sort_by(f64::total_cmp);
    let median_prob = present[(present.len() - 1) / 2];
    let alpha = class_probs
        .iter()
        .map(|&p| if p > 0.0 { median_prob / p } else { 0.0 })
        .collect();
    Ok(ClassWeights {
        alpha,
        median_prob,
        class_probs,
    })
}

/// Weighted cross-entropy of `N×C×H×W` logits against `N×H×W` labels.
pub fn semantic_loss<T: Element>(tape: &mut Tape<T>, logits: Var, labels: &[i32], weights: &ClassWeights) -> Result<Var> {
    let c = tape.shape(logits).get(1).copied().unwrap_or(0);
    if weights.num_classes() != c {
        return Err(dim_err!("{} class weights for {c}-class logits", weights.num_classes()));
    }
    tape.softmax_cross_entropy(logits, labels, &weights.as_elements(), IGNORE_INDEX)
}

/// berHu loss with a mask covering every element of `pred`.
pub fn berhu_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, valid: &[bool]) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(dim_err!(
            "berhu: prediction {:?} vs target {:?}",
            tape.shape(pred),
            target.shape()
        ));
    }
    Ok(tape.berhu(pred, target.data(), valid)?.0)
}

/// Expands an `N×H×W` pixel mask to every channel of an `N×C×H×W` map.
pub fn expand_mask(pixel_valid: &[bool], n: usize, c: usize) -> Vec<bool> {
    let hw = pixel_valid.len() / n.max(1);
    let mut out = Vec::with_capacity(n * c * hw);
    for b in 0..n {
        let row = &pixel_valid[b * hw..(b + 1) * hw];
        for _ in 0..c {
            out.extend_from_slice(row);
        }
    }
    out
}

/// berHu over a channel-stacked map with one validity flag per pixel; the
/// threshold comes from the largest residual over all channels.
pub fn pixel_berhu_loss<T: Element>(
    tape: &mut Tape<T>,
    pred: Var,
    target: &Tensor<T>,
    pixel_valid: &[bool],
) -> Result<Var> {
    let (n, c, h, w) = target.dims4()?;
    if pixel_valid.len() != n * h * w {
        return Err(dim_err!("mask has {} entries for {n}x{h}x{w} pixels", pixel_valid.len()));
    }
    berhu_loss(tape, pred, target, &expand_mask(pixel_valid, n, c))
}

/// Depth regression loss on a 1-channel prediction.
pub fn depth_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, pixel_valid: &[bool]) -> Result<Var> {
    pixel_berhu_loss(tape, pred, target, pixel_valid)
}

/// Surface-normal loss on a 3-channel prediction.
pub fn normal_loss<T: Element>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>, pixel_valid: &[bool]) -> Result<Var> {
    if target.shape().get(1) != Some(&3) {
        return Err(dim_err!("normal target must have 3 channels, got {:?}", target.shape()));
    }
    pixel_berhu_loss(tape, pred, target, pixel_valid)
}

/// Nearest-neighbour downsampling of an `N×H×W` label map by an integer
/// factor; output pixel `(i, j)` takes the label at `(i·f, j·f)`.
pub fn downsample_labels(labels: &[i32], n: usize, h: usize, w: usize, factor: usize) -> Result<Vec<i32>> {
    if labels.len() != n * h * w {
        return Err(dim_err!("{} labels for {n}x{h}x{w}", labels.len()));
    }
    if factor == 0 || !h.is_multiple_of(factor) || !w.is_multiple_of(factor) {
        return Err(dim_err!("cannot downsample {h}x{w} labels by {factor}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let mut out = Vec::with_capacity(n * oh * ow);
    for b in 0..n {
        for i in 0..oh {
            let row = &labels[(b * h + i * factor) * w..];
            out.extend((0..ow).map(|j| row[j * factor]));
        }
    }
    Ok(out)
}

/// One weighted cross-entropy term per side output, each against labels
/// downsampled to the side output's resolution.
pub fn pyramid_loss<T: Element>(
    tape: &mut Tape<T>,
    side_outputs: &[Var],
    labels: &[i32],
    label_hw: (usize, usize),
    weights: &ClassWeights,
) -> Result<Vec<Var>> {
    let (h, w) = label_hw;
    side_outputs
        .iter()
        .map(|&side| {
            let (n, _, sh, sw) = tape.value(side).dims4()?;
            if sh == 0 || h % sh != 0 || w / sw != h / sh {
                return Err(dim_err!("side output {sh}x{sw} does not tile {h}x{w} labels"));
            }
            let small = downsample_labels(labels, n, h, w, h / sh)?;
            semantic_loss(tape, side, &small, weights)
        })
        .collect()
}

/// Scalar loss components of one batch and their plain sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub semantic: f64,
    /// Secondary-branch loss; zero for a single-decoder model.
    pub task: f64,
    pub pyramid: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(semantic: f64, task: f64, pyramid: Vec<f64>) -> Self {
        let total = semantic + task + pyramid.iter().sum::<f64>();
        LossBreakdown {
            semantic,
            task,
            pyramid,
            total,
        }
    }

    /// Component-wise mean of several batches.
    pub fn mean(items: &[LossBreakdown]) -> Option<Self> {
        let first = items.first()?;
        let k = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / k;
        let pyramid = (0..first.pyramid.len())
            .map(|i| avg(&|b: &LossBreakdown| b.pyramid[i]))
            .collect();
        Some(LossBreakdown::new(avg(&|b| b.semantic), avg(&|b| b.task), pyramid))
    }
}

/// Loss variables on the tape for one forward pass.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub semantic: Var,
    pub task: Option<Var>,
    pub pyramid: Vec<Var>,
}

impl LossTerms {
    /// Adds the total `L_S + L_T + Σ L_Pk` to the tape.
    pub fn total<T: Element>(&self, tape: &mut Tape<T>) -> Result<(Var, LossBreakdown)> {
        let mut terms = vec![self.semantic];
        terms.extend(self.task);
        terms.extend(&self.pyramid);
        let total = tape.add_all(&terms)?;
        let scalar = |v: Var| tape.value(v).item().as_f64();
        let breakdown = LossBreakdown::new(
            scalar(self.semantic),
            self.task.map_or(0.0, scalar),
            self.pyramid.iter().map(|&v| scalar(v)).collect(),
        );
        Ok((total, breakdown))
    }
}
