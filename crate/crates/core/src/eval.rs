//! Segmentation metrics and attention/mask correlation.

use serde::{Deserialize, Serialize};

use crate::error::{PftError, Result};
use crate::segmap::{LabelMap, UNLABELED};

/// `K x K` pixel counts, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
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

    /// Adds one image; unlabeled ground-truth pixels are skipped.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(PftError::Shape {
                op: "confusion_accumulate",
                lhs: vec![pred.height, pred.width],
                rhs: vec![gt.height, gt.width],
            });
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == UNLABELED {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(PftError::Data(format!(
                    "label ({g}, {p}) outside {} categories",
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// Entrywise sum with a matrix from another shard.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.classes, other.classes, "merging mismatched matrices");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class IoU (`None` for classes absent from both prediction and
    /// ground truth) and their mean over the remaining classes.
    pub fn miou(&self) -> Result<(f64, Vec<Option<f64>>)> {
        let k = self.classes;
        let per_class: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
        if valid.is_empty() {
            return Err(PftError::EmptyConfusion);
        }
        Ok((valid.iter().sum::<f64>() / valid.len() as f64, per_class))
    }
}

/// Pearson correlation over flattened maps of equal length.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PftError::Shape {
            op: "pearson",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 {
        return Err(PftError::UndefinedCorrelation("first map is constant"));
    }
    if sbb == 0.0 {
        return Err(PftError::UndefinedCorrelation("second map is constant"));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation between an attention map and a (downsampled) mask.
pub fn pearson_attn_mask(weights: &[f64], mask: &[f64]) -> Result<f64> {
    pearson(weights, mask)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PearsonEntry {
    pub layer: usize,
    pub scale: usize,
    pub mean: f64,
    pub count: usize,
}

/// Metrics report written as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
    pub pearson_by_scale_layer: Vec<PearsonEntry>,
}

impl MetricsReport {
    pub fn mean_pearson(&self) -> f64 {
        let (sum, n) = self
            .pearson_by_scale_layer
            .iter()
            .fold((0.0, 0usize), |(s, n), e| (s + e.mean * e.count as f64, n + e.count));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}
