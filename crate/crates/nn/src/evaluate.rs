//! Running trained models over a split and turning the outputs into reports.

use ndarray::Array2;
use strataseg_core::dataio::SplitLoader;
use strataseg_core::metrics::{
    msp_baseline, select_threshold, seg_report, uq_report, Calibration, ConfusionCounts, SegMetricsReport,
    UqMetricsReport,
};
use strataseg_core::{argmax_labels, ImageSample, LabelMask, ProbabilityMap, SoftLabelMap, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::losses::{error_weights, soft_label_targets, WfmseParams};
use crate::metanet::MetaNet;
use crate::segnet::SegNet;
use crate::tensor::Normalization;

/// Frozen segmentation output for one sample, with the meta-model's training targets.
#[derive(Debug, Clone)]
pub struct MetaItem {
    pub probs: ProbabilityMap,
    pub pred: LabelMask,
    pub gt: LabelMask,
    pub target: SoftLabelMap,
    pub weights: Array2<f32>,
}

impl MetaItem {
    pub fn correct(&self) -> impl Iterator<Item = bool> + '_ {
        self.pred.as_array().iter().zip(self.gt.as_array()).map(|(a, b)| a == b)
    }
}

/// Evaluation-mode predictions for a list of samples, in chunks of `batch`.
pub fn predict_samples(
    seg: &SegNet,
    norm: &Normalization,
    samples: &[ImageSample],
    batch: usize,
) -> Result<Vec<(ProbabilityMap, LabelMask)>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let images: Vec<_> = chunk.iter().map(ImageSample::image).collect();
        for probs in seg.predict_probs(&images, norm)? {
            let labels = argmax_labels(&probs);
            out.push((probs, labels));
        }
    }
    Ok(out)
}

/// Builds meta-model inputs and targets for every sample of a split.
pub fn meta_items(seg: &SegNet, norm: &Normalization, loader: &SplitLoader, params: &WfmseParams) -> Result<Vec<MetaItem>> {
    let mut items = Vec::with_capacity(loader.len());
    for batch in loader.epoch(0) {
        let batch = batch?;
        let preds = predict_samples(seg, norm, &batch.samples, batch.len())?;
        for (sample, (probs, pred)) in batch.samples.iter().zip(preds) {
            let gt = sample.mask().clone();
            let target = soft_label_targets(&probs, &pred, &gt)?;
            let weights = error_weights(&pred, &gt, params)?;
            items.push(MetaItem {
                probs,
                pred,
                gt,
                target,
                weights,
            });
        }
    }
    Ok(items)
}

/// Pooled IoU / precision over every sample of a split.
pub fn evaluate_segmentation(seg: &SegNet, norm: &Normalization, loader: &SplitLoader) -> Result<SegMetricsReport> {
    let mut counts = ConfusionCounts::new(NUM_CLASSES);
    for batch in loader.epoch(0) {
        let batch = batch?;
        for (sample, (_, pred)) in batch.samples.iter().zip(predict_samples(seg, norm, &batch.samples, batch.len())?) {
            counts.accumulate(&pred, sample.mask())?;
        }
    }
    Ok(seg_report(&counts))
}

/// Pixel-level scores pooled over a split.
#[derive(Debug, Clone, Default)]
pub struct PixelScores {
    pub target: Vec<f32>,
    pub predicted: Vec<f32>,
    pub correct: Vec<bool>,
    pub max_prob: Vec<f32>,
}

impl PixelScores {
    pub fn len(&self) -> usize {
        self.correct.len()
    }

    pub fn is_empty(&self) -> bool {
        self.correct.is_empty()
    }
}

/// Runs the meta-model over prepared items and pools the scores.
pub fn score_items(meta: &MetaNet, items: &[MetaItem], batch: usize) -> Result<PixelScores> {
    let mut s = PixelScores::default();
    for chunk in items.chunks(batch.max(1)) {
        let probs: Vec<&ProbabilityMap> = chunk.iter().map(|i| &i.probs).collect();
        for (item, soft) in chunk.iter().zip(meta.predict(&probs)?) {
            s.target.extend(item.target.as_array().iter().copied());
            s.predicted.extend(soft.as_array().iter().copied());
            s.correct.extend(item.correct());
            s.max_prob.extend(
                item.probs
                    .as_array()
                    .rows()
                    .into_iter()
                    .map(|p| p.iter().copied().fold(f32::MIN, f32::max)),
            );
        }
    }
    Ok(s)
}

/// Misclassification-detection report on `test`, thresholded at `tau` or at the
/// F1-SS-optimal threshold on `val`.
pub fn evaluate_uq(
    meta: &MetaNet,
    val: &[MetaItem],
    test: &[MetaItem],
    tau: Option<f64>,
) -> Result<(UqMetricsReport, Option<Calibration>)> {
    let (tau, calibration) = match tau {
        Some(t) => {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [-1, 1]")));
            }
            (t, None)
        }
        None => {
            let v = score_items(meta, val, 8)?;
            let cal = select_threshold(&v.predicted, &v.correct)?;
            (cal.tau, Some(cal))
        }
    };
    let t = score_items(meta, test, 8)?;
    let mut report = uq_report(&t.target, &t.predicted, &t.correct, tau)?;
    report.msp_baseline = msp_baseline(&t.max_prob, &t.correct).ok();
    Ok((report, calibration))
}
