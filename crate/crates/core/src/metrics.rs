//! Segmentation metrics from a confusion matrix.

use std::fmt::Write as _;

use crate::error::{data_err, dim_err, Result};
use crate::tensor::{Element, Tensor};

/// `C×C` counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one pair of label maps; pixels whose ground truth is
    /// `ignore_index` are skipped.
    pub fn accumulate(&mut self, pred: &[i32], gt: &[i32], ignore_index: i32) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(dim_err!("{} predictions for {} labels", pred.len(), gt.len()));
        }
        let c = self.classes as i32;
        let mut local = vec![0u64; self.counts.len()];
        for (&p, &g) in pred.iter().zip(gt) {
            if g == ignore_index {
                continue;
            }
            if !(0..c).contains(&g) || !(0..c).contains(&p) {
                return Err(data_err!("label pair (gt {g}, pred {p}) outside [0, {c})"));
            }
            local[g as usize * self.classes + p as usize] += 1;
        }
        self.counts.iter_mut().zip(local).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(dim_err!("cannot merge {}-class and {}-class matrices", self.classes, other.classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn row_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|j| self.get(c, j)).sum()
    }

    fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, c)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegMetrics {
    pub pixacc: f64,
    pub macc: f64,
    pub miou: f64,
    /// `None` for classes absent from the ground truth.
    pub class_acc: Vec<Option<f64>>,
    pub class_iou: Vec<Option<f64>>,
}

/// PixAcc, mAcc and mIoU; the means run over classes present in the
/// ground truth.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<SegMetrics> {
    let total = cm.total();
    if total == 0 {
        return Err(data_err!("confusion matrix is empty"));
    }
    let trace: u64 = (0..cm.classes).map(|c| cm.get(c, c)).sum();
    let mut class_acc = Vec::with_capacity(cm.classes);
    let mut class_iou = Vec::with_capacity(cm.classes);
    for c in 0..cm.classes {
        let tp = cm.get(c, c) as f64;
        let row = cm.row_sum(c);
        if row == 0 {
            class_acc.push(None);
            class_iou.push(None);
            continue;
        }
        let union = row + cm.col_sum(c) - cm.get(c, c);
        class_acc.push(Some(tp / row as f64));
        class_iou.push(Some(tp / union as f64));
    }
    let mean = |v: &[Option<f64>]| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(SegMetrics {
        pixacc: trace as f64 / total as f64,
        macc: mean(&class_acc),
        miou: mean(&class_iou),
        class_acc,
        class_iou,
    })
}

/// Per-pixel argmax over the class axis of `N×C×H×W` scores; ties go to
/// the lowest class index.
pub fn argmax_labels<T: Element>(scores: &Tensor<T>) -> Result<Vec<i32>> {
    let (n, c, h, w) = scores.dims4()?;
    let hw = h * w;
    let z = scores.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for k in 1..c {
                if z[(b * c + k) * hw + p] > z[(b * c + best) * hw + p] {
                    best = k;
                }
            }
            out.push(best as i32);
        }
    }
    Ok(out)
}

/// CSV with one row per class: `class,accuracy,iou`. Absent classes have
/// empty cells.
pub fn per_class_csv(metrics: &SegMetrics, class_names: &[String]) -> String {
    let mut s = String::from("class,accuracy,iou\n");
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for (i, (acc, iou)) in metrics.class_acc.iter().zip(&metrics.class_iou).enumerate() {
        let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
        let _ = writeln!(s, "{name},{},{}", cell(*acc), cell(*iou));
    }
    s
}
