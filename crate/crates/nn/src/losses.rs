//! Dice loss, soft-label targets, error weights and the weighted focal MSE.

use candle_core::{DType, Tensor};
use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};
use strataseg_core::{LabelMask, ProbabilityMap, SoftLabelMap};

use crate::error::{Error, Result};
use crate::tensor::{fields_to_tensor, masks_to_onehot, probs_to_tensor, soft_to_tensor};

/// Smoothing added to the numerator and denominator of every class's Dice score.
pub const DICE_EPS: f64 = 1e-6;

/// 1 − mean over classes of (2Σpg + ε) / (Σp² + Σg² + ε), sums over the whole batch.
/// `probs` and `onehot` are B×C×H×W.
pub fn dice_loss_tensor(probs: &Tensor, onehot: &Tensor) -> Result<Tensor> {
    if probs.dims() != onehot.dims() {
        return Err(Error::Shape(format!(
            "probabilities {:?} vs targets {:?}",
            probs.dims(),
            onehot.dims()
        )));
    }
    let c = probs.dim(1)?;
    let inter = (probs * onehot)?.sum((0, 2, 3))?;
    let den = (probs.sqr()?.sum((0, 2, 3))? + onehot.sqr()?.sum((0, 2, 3))?)?;
    let dice = ((inter * 2.0)? + DICE_EPS)?.div(&(den + DICE_EPS)?)?;
    Ok((1.0 - (dice.sum_all()? / c as f64)?)?)
}

/// Dice loss of a batch of probability maps against label masks.
pub fn dice_loss(probs: &[&ProbabilityMap], gt: &[&LabelMask]) -> Result<f64> {
    if probs.len() != gt.len() {
        return Err(Error::Shape(format!("{} probability maps for {} masks", probs.len(), gt.len())));
    }
    if probs.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for (p, g) in probs.iter().zip(gt) {
        let (h, w, _) = p.dim();
        if (h, w) != g.dim() {
            return Err(Error::Shape(format!("probabilities are {h}x{w}, mask is {:?}", g.dim())));
        }
    }
    let c = probs[0].num_classes();
    let p = probs_to_tensor(probs, DType::F64)?;
    let g = masks_to_onehot(gt, c, DType::F64)?;
    Ok(dice_loss_tensor(&p, &g)?.to_scalar::<f64>()?)
}

/// Signed certainty targets: P(true class) where the prediction is correct,
/// −(1 − P(true class)) where it is wrong.
pub fn soft_label_targets(probs: &ProbabilityMap, pred: &LabelMask, gt: &LabelMask) -> Result<SoftLabelMap> {
    let (h, w, c) = probs.dim();
    if pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape(format!(
            "probabilities are {h}x{w}, prediction {:?}, ground truth {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    gt.validate(c)?;
    let p = probs.as_array();
    let mut u = Array2::zeros((h, w));
    Zip::indexed(&mut u)
        .and(pred.as_array())
        .and(gt.as_array())
        .for_each(|(r, col), u, &yp, &yt| {
            let pt = p[[r, col, yt as usize]].clamp(0.0, 1.0);
            *u = if yp == yt { pt } else { -(1.0 - pt) };
        });
    Ok(SoftLabelMap::new(u)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WfmseParams {
    pub e_correct: f64,
    pub e_incorrect: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for WfmseParams {
    fn default() -> Self {
        WfmseParams {
            e_correct: 1.0,
            e_incorrect: 8.0,
            beta: 20.0,
            gamma: 1.0,
        }
    }
}

impl WfmseParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.e_correct > 0.0 && self.e_incorrect > 0.0) {
            return Err(Error::Config("WFMSE weights must be positive".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config("WFMSE beta must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("WFMSE gamma must be non-negative".into()));
        }
        Ok(())
    }
}

/// `e_correct` where the prediction matches the ground truth, `e_incorrect` elsewhere.
pub fn error_weights(pred: &LabelMask, gt: &LabelMask, params: &WfmseParams) -> Result<Array2<f32>> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
    }
    let (ec, ei) = (params.e_correct as f32, params.e_incorrect as f32);
    Ok(Zip::from(pred.as_array())
        .and(gt.as_array())
        .map_collect(|a, b| if a == b { ec } else { ei }))
}

/// mean(e · (u − û)² · (2σ(β|u − û|) − 1)^γ) over all elements. The focal factor is
/// evaluated as tanh(β|u − û| / 2), which is the same function.
pub fn wfmse_loss_tensor(u: &Tensor, u_hat: &Tensor, weights: &Tensor, params: &WfmseParams) -> Result<Tensor> {
    if u.dims() != u_hat.dims() || u.dims() != weights.dims() {
        return Err(Error::Shape(format!(
            "targets {:?}, predictions {:?}, weights {:?}",
            u.dims(),
            u_hat.dims(),
            weights.dims()
        )));
    }
    let d = (u_hat - u)?;
    let se = d.sqr()?;
    let weighted = (weights * &se)?;
    let per_pixel = if params.gamma == 0.0 {
        weighted
    } else {
        let focal = (d.abs()? * (params.beta / 2.0))?.tanh()?;
        let focal = if params.gamma == 1.0 {
            focal
        } else {
            focal.clamp(1e-30, 1.0)?.powf(params.gamma)?
        };
        (weighted * focal)?
    };
    let n = per_pixel.elem_count().max(1) as f64;
    Ok((per_pixel.sum_all()? / n)?)
}

/// WFMSE of one soft-label map pair.
pub fn wfmse_loss(u: &SoftLabelMap, u_hat: &SoftLabelMap, weights: &Array2<f32>, params: &WfmseParams) -> Result<f64> {
    params.validate()?;
    let ut = soft_to_tensor(&[u], DType::F64)?;
    let uh = soft_to_tensor(&[u_hat], DType::F64)?;
    let wt = fields_to_tensor(&[weights], DType::F64)?;
    Ok(wfmse_loss_tensor(&ut, &uh, &wt, params)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};

    fn pm(v: Array3<f32>) -> ProbabilityMap {
        ProbabilityMap::new(v).unwrap()
    }

    #[test]
    fn dice_perfect_overlap_is_zero() {
        let gt = LabelMask::new(array![[0u8, 1], [2, 1]]);
        let oh = strataseg_core::one_hot(&gt, 3).unwrap().mapv(f32::from);
        let l = dice_loss(&[&pm(oh)], &[&gt]).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn dice_half_split_single_pixel() {
        // Class 0: 2·0.5 / (0.25 + 1) = 0.8; class 1: 0 / 0.25 = 0.
        let gt = LabelMask::new(array![[0u8]]);
        let l = dice_loss(&[&pm(array![[[0.5f32, 0.5]]])], &[&gt]).unwrap();
        assert!((l - 0.6).abs() < 1e-5, "{l}");
    }

    #[test]
    fn dice_disjoint_is_one() {
        let gt = LabelMask::new(array![[0u8, 1]]);
        let l = dice_loss(&[&pm(array![[[0f32, 1.], [1., 0.]]])], &[&gt]).unwrap();
        assert!((l - 1.0).abs() < 1e-5);
    }

    #[test]
    fn soft_label_cases() {
        let probs = pm(array![[[0.3f32, 0.7], [0.3, 0.7], [0.0, 1.0]]]);
        let pred = LabelMask::new(array![[1u8, 1, 1]]);
        let gt = LabelMask::new(array![[1u8, 0, 0]]);
        let u = soft_label_targets(&probs, &pred, &gt).unwrap();
        let v = u.as_array();
        assert!((v[[0, 0]] - 0.7).abs() < 1e-7);
        assert!((v[[0, 1]] + 0.7).abs() < 1e-7);
        assert_eq!(v[[0, 2]], -1.0);
    }

    #[test]
    fn error_weight_cases() {
        let p = WfmseParams::default();
        let a = LabelMask::new(array![[0u8, 1]]);
        let b = LabelMask::new(array![[0u8, 2]]);
        assert_eq!(error_weights(&a, &a, &p).unwrap(), array![[1f32, 1.]]);
        assert_eq!(error_weights(&a, &b, &p).unwrap(), array![[1f32, 8.]]);
        let c = LabelMask::new(array![[3u8, 3]]);
        assert_eq!(error_weights(&a, &c, &p).unwrap(), array![[8f32, 8.]]);
    }

    #[test]
    fn wfmse_worked_values() {
        let p = WfmseParams::default();
        let factor = 2.0 / (1.0 + (-20f64).exp()) - 1.0;
        let l = wfmse_loss(
            &SoftLabelMap::new(array![[1f32]]).unwrap(),
            &SoftLabelMap::new(array![[0f32]]).unwrap(),
            &array![[1f32]],
            &p,
        )
        .unwrap();
        assert!((l - factor).abs() < 1e-12 && (l - 1.0).abs() < 1e-6);
        let l = wfmse_loss(
            &SoftLabelMap::new(array![[-0.5f32]]).unwrap(),
            &SoftLabelMap::new(array![[0.5f32]]).unwrap(),
            &array![[8f32]],
            &p,
        )
        .unwrap();
        assert!((l - 8.0 * factor).abs() < 1e-9 && (l - 8.0).abs() < 1e-6);
        let z = SoftLabelMap::new(array![[0.3f32, -0.2]]).unwrap();
        assert_eq!(wfmse_loss(&z, &z, &array![[1f32, 8.]], &p).unwrap(), 0.0);
    }

    #[test]
    fn wfmse_gamma_zero_and_fractional() {
        let u = SoftLabelMap::new(array![[0.5f32, 0.5]]).unwrap();
        let h = SoftLabelMap::new(array![[0.5f32, 0.0]]).unwrap();
        let w = array![[1f32, 1.]];
        let mse = wfmse_loss(&u, &h, &w, &WfmseParams { gamma: 0.0, ..Default::default() }).unwrap();
        assert!((mse - 0.125).abs() < 1e-12);
        let half = wfmse_loss(&u, &h, &w, &WfmseParams { gamma: 0.5, ..Default::default() }).unwrap();
        assert!((half - 0.125 * (5f64).tanh().sqrt()).abs() < 1e-9);
    }

    #[test]
    fn params_validation() {
        assert!(WfmseParams { beta: 0.0, ..Default::default() }.validate().is_err());
        assert!(WfmseParams { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(WfmseParams { e_incorrect: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = LabelMask::zeros(1, 2);
        let b = LabelMask::zeros(2, 1);
        assert!(error_weights(&a, &b, &WfmseParams::default()).is_err());
        let p = pm(array![[[1f32, 0.], [1., 0.]]]);
        assert!(soft_label_targets(&p, &b, &b).is_err());
        assert!(dice_loss(&[&p], &[&b]).is_err());
    }
}
