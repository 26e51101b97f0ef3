//! Confusion-matrix segmentation metrics. Pixels whose truth is void are not
//! scored, and the void class has no IoU.

use crate::decoder::{NUM_CLASSES, VOID};
use crate::error::{Error, Result};

/// `counts[truth][pred]` pixel pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        if let Some(&bad) = truth.iter().chain(pred).find(|&&c| c >= NUM_CLASSES) {
            return Err(Error::invalid("confusion", format!("class {bad}")));
        }
        for (&t, &p) in truth.iter().zip(pred) {
            if t != VOID {
                self.counts[t][p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// `TP / (TP + FP + FN)`; NaN for void and for classes absent from both truth
/// and prediction.
pub fn iou_per_class(cm: &ConfusionMatrix, c: usize) -> f64 {
    if c == VOID || c >= NUM_CLASSES {
        return f64::NAN;
    }
    let tp = cm.counts[c][c];
    let fn_: u64 = cm.counts[c].iter().sum::<u64>() - tp;
    let fp: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][c]).sum::<u64>() - tp;
    let den = tp + fp + fn_;
    if den == 0 {
        f64::NAN
    } else {
        tp as f64 / den as f64
    }
}

pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let valid: Vec<f64> = (0..NUM_CLASSES)
        .map(|c| iou_per_class(cm, c))
        .filter(|v| !v.is_nan())
        .collect();
    if valid.is_empty() {
        return Err(Error::invalid("miou", "no valid classes"));
    }
    Ok(valid.iter().sum::<f64>() / valid.len() as f64)
}
