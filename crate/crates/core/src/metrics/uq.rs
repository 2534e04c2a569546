//! Misclassification-detection measures over predicted soft labels.
//!
//! A pixel is *flagged correct* iff `û >= τ`. For the threshold-specific measures the
//! positive class is an incorrect classification, so `TP` counts misclassified pixels
//! that are flagged incorrect.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which outcome counts as positive when ranking pixels for AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Positive {
    /// Correct classifications; ranked by `û` (AP).
    Correct,
    /// Incorrect classifications; ranked by `-û` (AP-E).
    Incorrect,
}

/// Number of candidate thresholds in the calibration sweep.
pub const THRESHOLD_COUNT: usize = 201;

/// The calibration grid `{-1.00, -0.99, ..., 1.00}`.
pub fn threshold_grid() -> Vec<f64> {
    (0..THRESHOLD_COUNT)
        .map(|k| (k as f64 - 100.0) / 100.0)
        .collect()
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} scores for {b} correctness flags")));
    }
    Ok(())
}

/// `AP = Σ_n (R_n − R_{n−1}) P_n` over thresholds at each distinct score, `R_0 = 0`.
pub fn average_precision(u_hat: &[f32], correct: &[bool], positive: Positive) -> Result<f64> {
    check_lengths(u_hat.len(), correct.len())?;
    if let Some(v) = u_hat.iter().find(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("non-finite score {v}")));
    }
    let is_pos = |c: bool| match positive {
        Positive::Correct => c,
        Positive::Incorrect => !c,
    };
    let total_pos = correct.iter().filter(|&&c| is_pos(c)).count();
    if total_pos == 0 {
        let metric = match positive {
            Positive::Correct => "AP",
            Positive::Incorrect => "AP-E",
        };
        return Err(Error::UndefinedMetric {
            metric,
            reason: "no positive pixels".into(),
        });
    }
    let mut order: Vec<(f32, bool)> = u_hat
        .iter()
        .zip(correct)
        .map(|(&s, &c)| {
            let score = match positive {
                Positive::Correct => s,
                Positive::Incorrect => -s,
            };
            (score, is_pos(c))
        })
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0));

    let (mut tp, mut fp) = (0u64, 0u64);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = order[i].0;
        while i < order.len() && order[i].0 == score {
            if order[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Mean squared difference between target and predicted soft labels.
pub fn uq_mse(u: &[f32], u_hat: &[f32]) -> Result<f64> {
    if u.len() != u_hat.len() {
        return Err(Error::Shape(format!(
            "{} targets for {} predictions",
            u.len(),
            u_hat.len()
        )));
    }
    if u.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = u
        .iter()
        .zip(u_hat)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(sum / u.len() as f64)
}

/// Threshold-specific detection counts and rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionRates {
    pub tau: f64,
    pub spec: f64,
    pub sens: f64,
    pub f1_ss: f64,
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(spec: f64, sens: f64) -> f64 {
    if spec + sens == 0.0 {
        0.0
    } else {
        2.0 * sens * spec / (sens + spec)
    }
}

fn rates_from_counts(tau: f64, tp: u64, fp: u64, tn: u64, fn_: u64) -> DetectionRates {
    let spec = ratio_or_one(tn, tn + fp);
    let sens = ratio_or_one(tp, tp + fn_);
    DetectionRates {
        tau,
        spec,
        sens,
        f1_ss: harmonic(spec, sens),
        tp,
        fp,
        tn,
        fn_,
    }
}

/// Spec = TN/(TN+FP), Sens = TP/(TP+FN), F1-SS = harmonic mean. 0/0 rates are 1.
pub fn spec_sens_f1(u_hat: &[f32], correct: &[bool], tau: f64) -> Result<DetectionRates> {
    check_lengths(u_hat.len(), correct.len())?;
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::Validation(format!("threshold {tau} outside [-1, 1]")));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&s, &c) in u_hat.iter().zip(correct) {
        let flagged_correct = s as f64 >= tau;
        match (c, flagged_correct) {
            (true, true) => tn += 1,
            (true, false) => fp += 1,
            (false, false) => tp += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(rates_from_counts(tau, tp, fp, tn, fn_))
}

/// Result of the validation threshold sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub tau: f64,
    pub f1_ss: f64,
    /// `(τ, F1-SS)` for every evaluated grid point, ascending in τ.
    pub curve: Vec<(f64, f64)>,
}

/// Picks τ on the 201-point grid with the highest F1-SS; ties go to the smallest τ.
pub fn select_threshold(u_hat: &[f32], correct: &[bool]) -> Result<Calibration> {
    check_lengths(u_hat.len(), correct.len())?;
    let mut correct_scores: Vec<f64> = Vec::new();
    let mut incorrect_scores: Vec<f64> = Vec::new();
    for (&s, &c) in u_hat.iter().zip(correct) {
        if c {
            correct_scores.push(s as f64);
        } else {
            incorrect_scores.push(s as f64);
        }
    }
    if correct_scores.is_empty() || incorrect_scores.is_empty() {
        return Err(Error::Calibration(format!(
            "validation set has {} correct and {} incorrect pixels; need at least one of each",
            correct_scores.len(),
            incorrect_scores.len()
        )));
    }
    correct_scores.sort_by(f64::total_cmp);
    incorrect_scores.sort_by(f64::total_cmp);
    // Number of scores strictly below tau = flagged incorrect.
    let below = |v: &[f64], tau: f64| v.partition_point(|&s| s < tau) as u64;

    let mut curve = Vec::with_capacity(THRESHOLD_COUNT);
    let mut best: Option<(f64, f64)> = None;
    for tau in threshold_grid() {
        let fp = below(&correct_scores, tau);
        let tn = correct_scores.len() as u64 - fp;
        let tp = below(&incorrect_scores, tau);
        let fn_ = incorrect_scores.len() as u64 - tp;
        let f1 = rates_from_counts(tau, tp, fp, tn, fn_).f1_ss;
        curve.push((tau, f1));
        if best.is_none_or(|(_, b)| f1 > b) {
            best = Some((tau, f1));
        }
    }
    let (tau, f1_ss) = best.expect("grid is non-empty");
    Ok(Calibration { tau, f1_ss, curve })
}

/// The six misclassification-detection measures at a calibrated threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UqMetricsReport {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP-E")]
    pub ap_e: f64,
    #[serde(rename = "MSE")]
    pub mse: f64,
    #[serde(rename = "Spec")]
    pub spec: f64,
    #[serde(rename = "Sens")]
    pub sens: f64,
    #[serde(rename = "F1-SS")]
    pub f1_ss: f64,
    pub tau: f64,
    pub counts: DetectionRates,
    /// AP/AP-E of the maximum-softmax-probability baseline, when supplied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub msp_baseline: Option<MspBaseline>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MspBaseline {
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP-E")]
    pub ap_e: f64,
}

/// Computes every UQ measure for pooled test pixels at threshold `tau`.
pub fn uq_report(u: &[f32], u_hat: &[f32], correct: &[bool], tau: f64) -> Result<UqMetricsReport> {
    check_lengths(u_hat.len(), correct.len())?;
    let ap = average_precision(u_hat, correct, Positive::Correct)?;
    let ap_e = average_precision(u_hat, correct, Positive::Incorrect)?;
    let mse = uq_mse(u, u_hat)?;
    let counts = spec_sens_f1(u_hat, correct, tau)?;
    Ok(UqMetricsReport {
        ap,
        ap_e,
        mse,
        spec: counts.spec,
        sens: counts.sens,
        f1_ss: counts.f1_ss,
        tau,
        counts,
        msp_baseline: None,
    })
}

/// AP and AP-E when ranking pixels by their maximum softmax probability.
pub fn msp_baseline(max_prob: &[f32], correct: &[bool]) -> Result<MspBaseline> {
    Ok(MspBaseline {
        ap: average_precision(max_prob, correct, Positive::Correct)?,
        ap_e: average_precision(max_prob, correct, Positive::Incorrect)?,
    })
}
