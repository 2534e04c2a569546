use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Class, LabelMask};

/// Pooled per-class pixel counts over a set of images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub total_pixels: u64,
}

impl ConfusionCounts {
    pub fn new(num_classes: usize) -> Self {
        ConfusionCounts {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            total_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds one (prediction, ground truth) pair.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction is {:?} but ground truth is {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        let c = self.num_classes();
        pred.validate(c)?;
        gt.validate(c)?;
        for (&p, &g) in pred.as_array().iter().zip(gt.as_array().iter()) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                self.tp[p] += 1;
            } else {
                self.fp[p] += 1;
                self.fn_[g] += 1;
            }
        }
        self.total_pixels += pred.as_array().len() as u64;
        Ok(())
    }

    /// Correctly classified pixels across all classes.
    pub fn correct(&self) -> u64 {
        self.tp.iter().sum()
    }

    /// Ground-truth pixel count of `class` (TP + FN).
    pub fn gt_pixels(&self, class: usize) -> u64 {
        self.tp[class] + self.fn_[class]
    }

    pub fn pred_pixels(&self, class: usize) -> u64 {
        self.tp[class] + self.fp[class]
    }
}

impl AddAssign<&ConfusionCounts> for ConfusionCounts {
    fn add_assign(&mut self, rhs: &ConfusionCounts) {
        assert_eq!(self.num_classes(), rhs.num_classes(), "class count mismatch");
        for c in 0..self.num_classes() {
            self.tp[c] += rhs.tp[c];
            self.fp[c] += rhs.fp[c];
            self.fn_[c] += rhs.fn_[c];
        }
        self.total_pixels += rhs.total_pixels;
    }
}

/// Micro-aggregated confusion counts over paired masks.
pub fn seg_confusion(
    pred: &[LabelMask],
    gt: &[LabelMask],
    num_classes: usize,
) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground-truth masks",
            pred.len(),
            gt.len()
        )));
    }
    let mut counts = ConfusionCounts::new(num_classes);
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        counts
            .accumulate(p, g)
            .map_err(|e| Error::Shape(format!("pair {i}: {e}")))?;
    }
    Ok(counts)
}

/// Per-class IoU and precision with their class means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegMetricsReport {
    pub classes: Vec<String>,
    pub iou: Vec<f64>,
    pub precision: Vec<f64>,
    pub miou: f64,
    pub mp: f64,
    pub gt_pixels: Vec<u64>,
    pub pred_pixels: Vec<u64>,
}

impl SegMetricsReport {
    pub fn class_iou(&self, class: Class) -> f64 {
        self.iou[class.index()]
    }
}

/// IoU_c = TP/(TP+FP+FN), P_c = TP/(TP+FP).
///
/// A class with no ground-truth and no predicted pixels scores 1 on both. A class
/// that is present but never predicted has precision 0.
pub fn seg_report(counts: &ConfusionCounts) -> SegMetricsReport {
    let c = counts.num_classes();
    let mut iou = Vec::with_capacity(c);
    let mut precision = Vec::with_capacity(c);
    for k in 0..c {
        let (tp, fp, fn_) = (counts.tp[k], counts.fp[k], counts.fn_[k]);
        if tp + fp + fn_ == 0 {
            iou.push(1.0);
            precision.push(1.0);
            continue;
        }
        iou.push(tp as f64 / (tp + fp + fn_) as f64);
        precision.push(if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        });
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let classes = (0..c)
        .map(|k| {
            Class::from_index(k)
                .map(|cl| cl.label().to_string())
                .unwrap_or_else(|| format!("class{k}"))
        })
        .collect();
    SegMetricsReport {
        classes,
        miou: mean(&iou),
        mp: mean(&precision),
        iou,
        precision,
        gt_pixels: (0..c).map(|k| counts.gt_pixels(k)).collect(),
        pred_pixels: (0..c).map(|k| counts.pred_pixels(k)).collect(),
    }
}
