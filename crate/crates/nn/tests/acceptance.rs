//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL line
//! per criterion; exits non-zero if any fails.
//!
//! `STRATASEG_ACCEPTANCE=1,3` restricts the run to the listed criteria.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use strataseg_core::dataio::{load_split, LoaderOptions};
use strataseg_core::metrics::{
    average_precision, seg_confusion, seg_report, select_threshold, spec_sens_f1, threshold_grid, Positive,
};
use strataseg_core::synthgen::{generate_dataset, CanvasSize, DatasetManifest, DomainProfile, Split, SplitFractions};
use strataseg_core::{argmax_labels, Class, LabelMask, ProbabilityMap, SoftLabelMap};
use strataseg_nn::checkpoint::{CheckpointMeta, ModelKind};
use strataseg_nn::evaluate::{evaluate_segmentation, evaluate_uq, meta_items};
use strataseg_nn::layers::{softmax_channels, Ctx};
use strataseg_nn::losses::{
    dice_loss, dice_loss_tensor, soft_label_targets, wfmse_loss, wfmse_loss_tensor, WfmseParams, DICE_EPS,
};
use strataseg_nn::metanet::{MetaModelConfig, MetaNet};
use strataseg_nn::pipeline::{dataset_normalization, run_pipeline, PipelineConfig, PipelineOptions};
use strataseg_nn::segnet::{SegModelConfig, SegNet};
use strataseg_nn::tensor::masks_to_onehot;
use strataseg_nn::trainer::{train_meta, train_segmentation, Stage, StageConfig, StageOutput};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-300 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn random_probs(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> ProbabilityMap {
    let mut a = Array3::<f32>::zeros((h, w, c));
    for mut lane in a.lanes_mut(ndarray::Axis(2)) {
        let mut sum = 0.0;
        for v in lane.iter_mut() {
            *v = rng.random_range(0.0f32..1.0).powi(2);
            sum += *v;
        }
        lane.mapv_inplace(|v| v / sum);
    }
    ProbabilityMap::new_unchecked(a)
}

fn random_mask(rng: &mut impl Rng, h: usize, w: usize, c: usize) -> LabelMask {
    LabelMask::new(Array2::from_shape_fn((h, w), |_| rng.random_range(0..c) as u8))
}

/// Seeded uniform tensor in [lo, hi).
fn uniform<S: Into<candle_core::Shape>>(rng: &mut impl Rng, lo: f64, hi: f64, shape: S, dtype: DType) -> Tensor {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

/// Seeded normal tensor.
fn normal<S: Into<candle_core::Shape>>(rng: &mut impl Rng, std: f64, shape: S, dtype: DType) -> Tensor {
    let shape = shape.into();
    let v: Vec<f64> = (0..shape.elem_count())
        .map(|_| std * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
}

// ---------------------------------------------------------------------------
// Scalar oracles

fn dice_oracle(probs: &[&ProbabilityMap], gt: &[&LabelMask]) -> f64 {
    let c = probs[0].num_classes();
    let mut total = 0.0;
    for k in 0..c {
        let (mut inter, mut pp, mut gg) = (0.0f64, 0.0f64, 0.0f64);
        for (p, g) in probs.iter().zip(gt) {
            let (h, w, _) = p.dim();
            for r in 0..h {
                for col in 0..w {
                    let pv = p.as_array()[[r, col, k]] as f64;
                    let gv = if g.as_array()[[r, col]] as usize == k { 1.0 } else { 0.0 };
                    inter += pv * gv;
                    pp += pv * pv;
                    gg += gv * gv;
                }
            }
        }
        total += (2.0 * inter + DICE_EPS) / (pp + gg + DICE_EPS);
    }
    1.0 - total / c as f64
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn wfmse_oracle(u: &[f64], u_hat: &[f64], e: &[f64], p: &WfmseParams) -> f64 {
    let mut sum = 0.0;
    for i in 0..u.len() {
        let ae = (u[i] - u_hat[i]).abs();
        let se = ae * ae;
        let focal = (2.0 * sigmoid(p.beta * ae) - 1.0).powf(p.gamma);
        sum += e[i] * se * focal;
    }
    sum / u.len() as f64
}

// ---------------------------------------------------------------------------
// 1. Loss oracle equivalence

fn criterion_1() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for trial in 0..500 {
        let (b, c) = (rng.random_range(1..=3), rng.random_range(1..=6));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=4));
        let probs: Vec<_> = (0..b).map(|_| random_probs(&mut rng, h, w, c)).collect();
        let gt: Vec<_> = (0..b).map(|_| random_mask(&mut rng, h, w, c)).collect();
        let pr: Vec<_> = probs.iter().collect();
        let gr: Vec<_> = gt.iter().collect();
        let got = ok(dice_loss(&pr, &gr))?;
        let want = dice_oracle(&pr, &gr);
        worst = worst.max(rel_err(got, want));
        ensure!(rel_err(got, want) <= 1e-6, "dice trial {trial}: {got} vs oracle {want}");

        let params = WfmseParams {
            e_correct: 1.0,
            e_incorrect: rng.random_range(1.0..10.0),
            beta: rng.random_range(1.0..40.0),
            gamma: [0.0, 0.5, 1.0, 2.0][rng.random_range(0..4)],
        };
        let u = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..=1.0));
        let uh = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0f32..=1.0));
        let e = Array2::from_shape_fn((h, w), |_| {
            if rng.random_bool(0.5) {
                params.e_correct as f32
            } else {
                params.e_incorrect as f32
            }
        });
        let got = ok(wfmse_loss(
            &ok(SoftLabelMap::new(u.clone()))?,
            &ok(SoftLabelMap::new(uh.clone()))?,
            &e,
            &params,
        ))?;
        let f = |a: &Array2<f32>| a.iter().map(|&v| v as f64).collect::<Vec<_>>();
        let want = wfmse_oracle(&f(&u), &f(&uh), &f(&e), &params);
        worst = worst.max(rel_err(got, want));
        ensure!(rel_err(got, want) <= 1e-6, "wfmse trial {trial}: {got} vs oracle {want}");
    }

    // Worked examples.
    let p = ProbabilityMap::new_unchecked(Array3::from_shape_vec((1, 1, 2), vec![0.5, 0.5]).unwrap());
    let g = LabelMask::new(Array2::zeros((1, 1)));
    let d = ok(dice_loss(&[&p], &[&g]))?;
    ensure!((d - 0.6).abs() < 1e-5, "dice worked example gave {d}, expected 0.6");
    let one = |v: f32| SoftLabelMap::new(Array2::from_elem((1, 1), v)).unwrap();
    let defaults = WfmseParams::default();
    let a = ok(wfmse_loss(&one(1.0), &one(0.0), &Array2::from_elem((1, 1), 1.0), &defaults))?;
    ensure!((a - 1.0).abs() < 1e-6, "WFMSE worked example gave {a}, expected 1.0");
    let b = ok(wfmse_loss(&one(-0.5), &one(0.5), &Array2::from_elem((1, 1), 8.0), &defaults))?;
    ensure!((b - 8.0).abs() < 1e-6, "WFMSE worked example gave {b}, expected 8.0");
    Ok(format!("1000 oracle comparisons, worst relative error {worst:.1e}; worked examples {d:.6} / {a:.6} / {b:.6}"))
}

// ---------------------------------------------------------------------------
// 2. Gradient checks

/// Compares autograd and central differences for the listed scalars of `vars`.
fn grad_check(
    vars: &[(String, Var)],
    picks: &[(usize, usize)],
    loss: &dyn Fn() -> Tensor,
    h: f64,
    tol: f64,
) -> std::result::Result<f64, String> {
    let l = loss();
    let grads = ok(l.backward())?;
    let mut worst: f64 = 0.0;
    for &(vi, idx) in picks {
        let (name, var) = &vars[vi];
        let g = grads
            .get(var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx])
            .unwrap_or(0.0);
        let base = ok(var.as_tensor().flatten_all().and_then(|t| t.to_vec1::<f64>()))?;
        let shape = var.as_tensor().shape().clone();
        let eval_at = |delta: f64| -> f64 {
            let mut v = base.clone();
            v[idx] += delta;
            var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            loss().to_scalar::<f64>().unwrap()
        };
        let numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
        ok(var.set(&ok(Tensor::from_vec(base, shape, &Device::Cpu))?))?;
        let e = if g.abs().max(numeric.abs()) < 1e-10 { 0.0 } else { rel_err(g, numeric) };
        worst = worst.max(e);
        ensure!(e <= tol, "{name}[{idx}]: autograd {g:.9e} vs finite difference {numeric:.9e}");
    }
    Ok(worst)
}

fn all_picks(vars: &[(String, Var)]) -> Vec<(usize, usize)> {
    vars.iter()
        .enumerate()
        .flat_map(|(i, (_, v))| (0..v.elem_count()).map(move |j| (i, j)))
        .collect()
}

fn sample_picks(vars: &[(String, Var)], n: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    (0..n)
        .map(|_| {
            let i = rng.random_range(0..vars.len());
            (i, rng.random_range(0..vars[i].1.elem_count()))
        })
        .collect()
}

fn criterion_2() -> Check {
    let dev = Device::Cpu;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut report = Vec::new();

    // Dice on a 2×3×4×4 batch; probabilities are free variables here.
    let probs = ok(Var::from_tensor(&uniform(&mut rng, 0.05, 1.0, (2, 3, 4, 4), DType::F64)))?;
    let masks: Vec<_> = (0..2).map(|_| random_mask(&mut rng, 4, 4, 3)).collect();
    let onehot = ok(masks_to_onehot(&masks.iter().collect::<Vec<_>>(), 3, DType::F64))?;
    let vars = vec![("probs".to_string(), probs.clone())];
    let w = grad_check(&vars, &all_picks(&vars), &|| dice_loss_tensor(probs.as_tensor(), &onehot).unwrap(), 1e-6, 1e-4)?;
    report.push(format!("dice {w:.1e}"));

    // WFMSE with respect to the prediction, residuals kept away from zero.
    let u = uniform(&mut rng, -1.0, 1.0, (2, 4, 4), DType::F64);
    let offs: Vec<f64> = (0..32)
        .map(|_| rng.random_range(0.05..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    let u_hat = ok(Var::from_tensor(&ok(&u + ok(Tensor::from_vec(offs, (2, 4, 4), &dev))?)?))?;
    let e = ok(Tensor::from_vec(
        (0..32).map(|_| if rng.random_bool(0.3) { 8.0 } else { 1.0 }).collect::<Vec<f64>>(),
        (2, 4, 4),
        &dev,
    ))?;
    let vars = vec![("u_hat".to_string(), u_hat.clone())];
    for params in [WfmseParams::default(), WfmseParams { beta: 3.0, gamma: 2.0, ..Default::default() }] {
        let w = grad_check(
            &vars,
            &all_picks(&vars),
            &|| wfmse_loss_tensor(&u, u_hat.as_tensor(), &e, &params).unwrap(),
            1e-6,
            1e-4,
        )?;
        report.push(format!("wfmse(beta {}, gamma {}) {w:.1e}", params.beta, params.gamma));
    }

    // Tiny segmentation model end to end at 64².
    let seg = ok(SegNet::new(SegModelConfig::tiny(), 3, DType::F64))?;
    let x = ok(Var::from_tensor(&normal(&mut rng, 1.0, (1, 3, 64, 64), DType::F64)))?;
    let gt = random_mask(&mut rng, 64, 64, 6);
    let onehot = ok(masks_to_onehot(&[&gt], 6, DType::F64))?;
    let mut vars: Vec<(String, Var)> = seg
        .store()
        .names()
        .into_iter()
        .filter_map(|n| {
            let p = seg.store().get(&n)?;
            p.trainable.then_some((n, p.var))
        })
        .collect();
    let mut picks = sample_picks(&vars, 40, &mut rng);
    vars.push(("input".into(), x.clone()));
    picks.extend((0..8).map(|_| (vars.len() - 1, rng.random_range(0..3 * 64 * 64))));
    let seg_loss = || {
        let logits = seg.forward(x.as_tensor(), Ctx::EVAL_GRAD).unwrap();
        dice_loss_tensor(&softmax_channels(&logits).unwrap(), &onehot).unwrap()
    };
    let w = grad_check(&vars, &picks, &seg_loss, 1e-6, 1e-3)?;
    report.push(format!("segnet {w:.1e}"));

    // Tiny meta-model end to end at 64².
    let meta = ok(MetaNet::new(MetaModelConfig::tiny(), 4, DType::F64))?;
    let logits = normal(&mut rng, 2.0, (1, 6, 64, 64), DType::F64);
    let p_in = ok(softmax_channels(&logits))?;
    let u = uniform(&mut rng, -1.0, 1.0, (1, 64, 64), DType::F64);
    let e = ok(uniform(&mut rng, 0.0, 1.0, (1, 64, 64), DType::F64).ge(0.8))?;
    let e = ok(ok(e.to_dtype(DType::F64))?.affine(7.0, 1.0))?;
    let vars: Vec<(String, Var)> = meta
        .store()
        .names()
        .into_iter()
        .filter_map(|n| {
            let p = meta.store().get(&n)?;
            p.trainable.then_some((n, p.var))
        })
        .collect();
    let picks = sample_picks(&vars, 40, &mut rng);
    let meta_loss = || {
        let u_hat = meta.forward(&p_in, Ctx::EVAL_GRAD).unwrap();
        wfmse_loss_tensor(&u, &u_hat, &e, &WfmseParams::default()).unwrap()
    };
    let w = grad_check(&vars, &picks, &meta_loss, 1e-6, 1e-3)?;
    report.push(format!("metanet {w:.1e}"));
    Ok(format!("worst relative errors: {}", report.join(", ")))
}

// ---------------------------------------------------------------------------
// 3. Metric oracle equivalence

fn ap_oracle(scores: &[f32], positive: &[bool]) -> f64 {
    let total = positive.iter().filter(|&&p| p).count() as f64;
    let mut thresholds: Vec<f32> = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_r) = (0.0, 0.0);
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (s, p) in scores.iter().zip(positive) {
            if *s >= t {
                if *p {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let r = tp / total;
        ap += (r - prev_r) * (tp / (tp + fp));
        prev_r = r;
    }
    ap
}

/// (tn, fp, tp, fn, spec, sens, f1) by direct counting.
fn detection_oracle(u_hat: &[f32], correct: &[bool], tau: f64) -> (u64, u64, u64, u64, f64, f64, f64) {
    let (mut tn, mut fp, mut tp, mut fn_) = (0, 0, 0, 0);
    for (s, c) in u_hat.iter().zip(correct) {
        let says_correct = *s as f64 >= tau;
        match (c, says_correct) {
            (true, true) => tn += 1,
            (true, false) => fp += 1,
            (false, false) => tp += 1,
            (false, true) => fn_ += 1,
        }
    }
    let rate = |n: u64, d: u64| if d == 0 { 1.0 } else { n as f64 / d as f64 };
    let spec = rate(tn, tn + fp);
    let sens = rate(tp, tp + fn_);
    let f1 = if spec + sens == 0.0 { 0.0 } else { 2.0 * spec * sens / (spec + sens) };
    (tn, fp, tp, fn_, spec, sens, f1)
}

fn random_scores(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    if rng.random_bool(0.5) {
        (0..n).map(|_| rng.random_range(-10i32..=10) as f32 / 10.0).collect()
    } else {
        (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect()
    }
}

fn criterion_3() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for trial in 0..1000 {
        let c = rng.random_range(1..=6);
        let (h, w) = (rng.random_range(1..=16), rng.random_range(1..=16));
        let n = rng.random_range(1..=3);
        let preds: Vec<_> = (0..n).map(|_| random_mask(&mut rng, h, w, c)).collect();
        let gts: Vec<_> = (0..n).map(|_| random_mask(&mut rng, h, w, c)).collect();
        let counts = ok(seg_confusion(&preds, &gts, c))?;
        let report = seg_report(&counts);
        let (mut tp, mut fp, mut fn_) = (vec![0u64; c], vec![0u64; c], vec![0u64; c]);
        for (p, g) in preds.iter().zip(&gts) {
            for (&a, &b) in p.as_array().iter().zip(g.as_array()) {
                if a == b {
                    tp[a as usize] += 1;
                } else {
                    fp[a as usize] += 1;
                    fn_[b as usize] += 1;
                }
            }
        }
        ensure!(counts.tp == tp && counts.fp == fp && counts.fn_ == fn_, "trial {trial}: confusion counts differ");
        for k in 0..c {
            let (iou, prec) = if tp[k] + fp[k] + fn_[k] == 0 {
                (1.0, 1.0)
            } else {
                let p = if tp[k] + fp[k] == 0 { 0.0 } else { tp[k] as f64 / (tp[k] + fp[k]) as f64 };
                (tp[k] as f64 / (tp[k] + fp[k] + fn_[k]) as f64, p)
            };
            ensure!(report.iou[k] == iou && report.precision[k] == prec, "trial {trial}: class {k} metrics differ");
        }
        let miou = report.iou.iter().sum::<f64>() / c as f64;
        ensure!(report.miou == miou, "trial {trial}: mIoU differs");
    }

    let mut worst: f64 = 0.0;
    for trial in 0..500 {
        let n = rng.random_range(1..=64);
        let scores = random_scores(&mut rng, n);
        let mut correct: Vec<bool> = (0..n).map(|_| rng.random_bool(0.6)).collect();
        correct[0] = true;
        if n > 1 {
            correct[1] = false;
        }
        let ap = ok(average_precision(&scores, &correct, Positive::Correct))?;
        let want = ap_oracle(&scores, &correct);
        worst = worst.max((ap - want).abs());
        ensure!((ap - want).abs() <= 1e-12, "AP trial {trial}: {ap} vs {want}");
        if n > 1 {
            let neg: Vec<f32> = scores.iter().map(|s| -s).collect();
            let inc: Vec<bool> = correct.iter().map(|c| !c).collect();
            let ap_e = ok(average_precision(&scores, &correct, Positive::Incorrect))?;
            let want = ap_oracle(&neg, &inc);
            worst = worst.max((ap_e - want).abs());
            ensure!((ap_e - want).abs() <= 1e-12, "AP-E trial {trial}: {ap_e} vs {want}");
        }

        let tau = rng.random_range(-100i32..=100) as f64 / 100.0;
        let r = ok(spec_sens_f1(&scores, &correct, tau))?;
        let (tn, fp, tp, fn_, spec, sens, f1) = detection_oracle(&scores, &correct, tau);
        ensure!(
            (r.tn, r.fp, r.tp, r.fn_) == (tn, fp, tp, fn_) && (r.spec, r.sens, r.f1_ss) == (spec, sens, f1),
            "spec/sens trial {trial} differs at tau {tau}"
        );

        if n > 1 {
            let cal = ok(select_threshold(&scores, &correct))?;
            let grid = threshold_grid();
            ensure!(cal.curve.len() == 201 && grid.len() == 201, "sweep evaluated {} thresholds", cal.curve.len());
            let mut best = (f64::NAN, f64::NEG_INFINITY);
            for (k, (t, f)) in cal.curve.iter().enumerate() {
                let t_want = (k as f64 - 100.0) / 100.0;
                let f_want = detection_oracle(&scores, &correct, t_want).6;
                ensure!(*t == t_want && *f == f_want, "sweep point {k} differs in trial {trial}");
                if f_want > best.1 {
                    best = (t_want, f_want);
                }
            }
            ensure!(cal.tau == best.0 && cal.f1_ss == best.1, "trial {trial}: selected {} vs {}", cal.tau, best.0);
        }
    }
    Ok(format!("1000 mask pairs exact; 500 score vectors, worst AP deviation {worst:.1e}; 201-point sweep verified"))
}

// ---------------------------------------------------------------------------
// 4. Soft-label contract

fn criterion_4() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut pixels = 0usize;
    for trial in 0..200 {
        let (h, w, c) = (rng.random_range(1..=8), rng.random_range(1..=8), rng.random_range(2..=6));
        let mut probs = random_probs(&mut rng, h, w, c).into_array();
        // Exact one-hot pixels exercise P = 0 and P = 1.
        for r in 0..h {
            for col in 0..w {
                if rng.random_bool(0.25) {
                    let k = rng.random_range(0..c);
                    for j in 0..c {
                        probs[[r, col, j]] = if j == k { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        let probs = ProbabilityMap::new_unchecked(probs);
        let gt = random_mask(&mut rng, h, w, c);
        let pred = if rng.random_bool(0.5) { argmax_labels(&probs) } else { random_mask(&mut rng, h, w, c) };
        let u = ok(soft_label_targets(&probs, &pred, &gt))?;
        for ((r, col), &v) in u.as_array().indexed_iter() {
            pixels += 1;
            let y = gt.as_array()[[r, col]] as usize;
            let p = probs.as_array()[[r, col, y]];
            let correct = pred.as_array()[[r, col]] as usize == y;
            ensure!((-1.0..=1.0).contains(&v), "trial {trial}: u = {v} out of range");
            if p > 0.0 {
                ensure!((v > 0.0) == correct, "trial {trial}: sign of u = {v} disagrees with correctness {correct}");
            }
            if !correct {
                ensure!(v <= 0.0, "trial {trial}: misclassified pixel has u = {v}");
            }
            if p == 1.0 {
                ensure!(v == if correct { 1.0 } else { 0.0 }, "trial {trial}: P = 1 gave u = {v}");
            }
            if p == 0.0 {
                ensure!(v == if correct { 0.0 } else { -1.0 }, "trial {trial}: P = 0 gave u = {v}");
            }
        }
    }
    Ok(format!("{pixels} pixels checked"))
}

// ---------------------------------------------------------------------------
// 5. Architecture invariants

fn param_dims(store: &strataseg_nn::params::ParamStore, name: &str) -> std::result::Result<Vec<usize>, String> {
    store
        .get(name)
        .map(|p| p.var.dims().to_vec())
        .ok_or_else(|| format!("no parameter {name}"))
}

fn criterion_5() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut sizes = Vec::new();
    for (cfg, size) in [
        (SegModelConfig::tiny(), 64),
        (SegModelConfig::tiny(), 128),
        (SegModelConfig::tiny(), 512),
        (SegModelConfig::resnet152_like(), 64),
        (SegModelConfig::resnet152_like(), 512),
    ] {
        let name = format!("{:?}@{size}", cfg.backbone);
        let net = ok(SegNet::new(cfg.with_input_size(size), 0, DType::F32))?;
        let x = uniform(&mut rng, 0.0, 1.0, (1, 3, size, size), DType::F32);
        let y = ok(net.forward(&x, Ctx::EVAL))?;
        ensure!(y.dims() == [1, 6, size, size], "{name}: output {:?}", y.dims());
        sizes.push(name);
    }

    let full = ok(SegNet::new(SegModelConfig::resnet152_like().with_input_size(64), 0, DType::F32))?;
    let decoder: Vec<usize> = (1..=5)
        .map(|i| param_dims(full.store(), &format!("decoder.{i}.up.weight")).map(|d| d[1]))
        .collect::<std::result::Result<_, _>>()?;
    ensure!(decoder == [256, 128, 64, 32, 16], "segmentation decoder channels {decoder:?}");

    let meta = ok(MetaNet::new(MetaModelConfig::standard().with_input_size(64), 0, DType::F32))?;
    let enc: Vec<usize> = (1..=5)
        .map(|i| param_dims(meta.store(), &format!("encoder.{i}.c2.conv.weight")).map(|d| d[0]))
        .collect::<std::result::Result<_, _>>()?;
    let dec: Vec<usize> = (1..=4)
        .map(|i| param_dims(meta.store(), &format!("decoder.{i}.up.weight")).map(|d| d[1]))
        .collect::<std::result::Result<_, _>>()?;
    ensure!(enc[1..] == [128, 256, 512, 1024], "meta encoder channels {enc:?}");
    ensure!(dec == [256, 128, 64, 32], "meta decoder channels {dec:?}");

    let mut range = (f32::INFINITY, f32::NEG_INFINITY);
    for net in [meta, ok(MetaNet::new(MetaModelConfig::tiny(), 1, DType::F32))?] {
        let logits = normal(&mut rng, 3.0, (2, 6, 64, 64), DType::F32);
        let y = ok(net.forward(&ok(softmax_channels(&logits))?, Ctx::EVAL))?;
        let v = ok(y.flatten_all().and_then(|t| t.to_vec1::<f32>()))?;
        for x in v {
            ensure!(x > -1.0 && x < 1.0, "meta output {x} not strictly inside (-1, 1)");
            range = (range.0.min(x), range.1.max(x));
        }
    }
    Ok(format!(
        "output = input size for {}; decoder {decoder:?}; meta encoder {enc:?}, decoder {dec:?}; meta outputs in [{:.3}, {:.3}]",
        sizes.join(", "),
        range.0,
        range.1
    ))
}

// ---------------------------------------------------------------------------
// 6–9. Desk-scale training

struct Trained {
    manifest: DatasetManifest,
    seg: SegNet,
    norm: strataseg_nn::tensor::Normalization,
}

const SEG_EPOCHS: usize = 20;
const META_EPOCHS: usize = 20;
const META_LR: f64 = 1e-3;

fn target_dataset(dir: &Path) -> std::result::Result<DatasetManifest, String> {
    // 313 images under the standard fractions give 200 training images.
    ok(generate_dataset(
        &DomainProfile::agr567like(),
        313,
        SplitFractions::standard(),
        7,
        CanvasSize::square(64),
        &dir.join("agr567like"),
    ))
}

fn criterion_6(dir: &Path, slot: &mut Option<Trained>) -> Check {
    let start = Instant::now();
    let manifest = target_dataset(dir)?;
    ensure!(manifest.split_len(Split::Train) == 200, "training split has {}", manifest.split_len(Split::Train));
    let norm = ok(dataset_normalization(&manifest, 64))?;
    let seg = ok(SegNet::new(SegModelConfig::tiny(), 7, DType::F32))?;
    let mut cfg = StageConfig::segmentation(Stage::Stage3);
    cfg.epochs = SEG_EPOCHS;
    cfg.seed = 7;
    let out = StageOutput::new(dir.join("ck"), "seg");
    let result = ok(train_segmentation(&seg, &norm, &manifest, &cfg, &out, CheckpointMeta::new(ModelKind::Segmentation, json!(null))))?;
    let test = ok(load_split(&manifest, Split::Test, 8, 0, LoaderOptions::eval(64)))?;
    let report = ok(evaluate_segmentation(&seg, &norm, &test))?;
    let losses = result.log.losses();
    let (first, last) = (losses[0], *losses.last().unwrap());
    let secs = start.elapsed().as_secs_f64();
    *slot = Some(Trained { manifest, seg, norm });
    ensure!(report.miou >= 0.80, "test mIoU {:.4} < 0.80", report.miou);
    ensure!(last <= 0.5 * first, "training Dice loss fell only from {first:.4} to {last:.4}");
    ensure!(secs <= 20.0 * 60.0, "took {secs:.0}s, over 20 minutes");
    Ok(format!(
        "test mIoU {:.4} (best epoch {} of {SEG_EPOCHS}), Dice loss {first:.4} -> {last:.4}, {secs:.0}s",
        report.miou, result.best_epoch
    ))
}

fn criterion_8_and_9a(dir: &Path, trained: Option<&Trained>) -> (Check, Check) {
    let Some(t) = trained else {
        let e = Err("criterion 6 model unavailable".to_string());
        return (e.clone(), e);
    };
    let before = t.seg.store().checksum();
    let meta = MetaNet::new(MetaModelConfig::tiny(), 8, DType::F32).unwrap();
    let mut cfg = StageConfig::meta();
    cfg.epochs = META_EPOCHS;
    cfg.lr = META_LR;
    cfg.seed = 8;
    let wfmse = WfmseParams::default();
    let out = StageOutput::new(dir.join("ck"), "meta");
    let trained_meta = train_meta(&t.seg, &t.norm, &meta, &t.manifest, &cfg, &wfmse, &out, CheckpointMeta::new(ModelKind::Meta, json!(null)));
    let after = t.seg.store().checksum();

    let freeze = (|| -> Check {
        let r = trained_meta.as_ref().map_err(|e| e.to_string())?;
        let (before, after) = (before.as_ref().map_err(|e| e.to_string())?.clone(), after.as_ref().map_err(|e| e.to_string())?.clone());
        ensure!(before == after && r.seg_checksum == before, "checksum changed: {before} -> {after}");
        Ok(format!("segmentation checksum {}… unchanged by meta training", &before[..12]))
    })();

    let detect = (|| -> Check {
        let r = trained_meta.as_ref().map_err(|e| e.to_string())?;
        let val = ok(load_split(&t.manifest, Split::Val, 8, 0, LoaderOptions::eval(64)))?;
        let test = ok(load_split(&t.manifest, Split::Test, 8, 0, LoaderOptions::eval(64)))?;
        let val_items = ok(meta_items(&t.seg, &t.norm, &val, &wfmse))?;
        let test_items = ok(meta_items(&t.seg, &t.norm, &test, &wfmse))?;
        let (uq, _) = ok(evaluate_uq(&meta, &val_items, &test_items, None))?;
        let summary = format!(
            "F1-SS {:.4} at tau {:.2}, AP {:.4}, AP-E {:.4}, MSE {:.4} (best epoch {} of {META_EPOCHS}, lr {META_LR:e})",
            uq.f1_ss, uq.tau, uq.ap, uq.ap_e, uq.mse, r.best_epoch
        );
        ensure!(uq.f1_ss >= 0.70 && uq.ap >= 0.95, "{summary}");
        Ok(summary)
    })();
    (detect, freeze)
}

fn criterion_7(dir: &Path) -> Check {
    let target = target_dataset(dir)?;
    let related = ok(generate_dataset(
        &DomainProfile::agr2like(),
        200,
        SplitFractions::train_only(),
        17,
        CanvasSize::square(64),
        &dir.join("agr2like"),
    ))?;
    let norm = ok(dataset_normalization(&related, 64))?;
    let seg = ok(SegNet::new(SegModelConfig::tiny(), 17, DType::F32))?;
    let test = ok(load_split(&target, Split::Test, 8, 0, LoaderOptions::eval(64)))?;

    let mut s2 = StageConfig::segmentation(Stage::Stage2);
    s2.epochs = 10;
    s2.seed = 2;
    ok(train_segmentation(&seg, &norm, &related, &s2, &StageOutput::new(dir.join("ck"), "stage2"), CheckpointMeta::new(ModelKind::Segmentation, json!(null))))?;
    let before = ok(evaluate_segmentation(&seg, &norm, &test))?;

    let mut s3 = StageConfig::segmentation(Stage::Stage3);
    s3.epochs = 10;
    s3.seed = 3;
    ok(train_segmentation(&seg, &norm, &target, &s3, &StageOutput::new(dir.join("ck"), "stage3"), CheckpointMeta::new(ModelKind::Segmentation, json!(null))))?;
    let after = ok(evaluate_segmentation(&seg, &norm, &test))?;

    let (o0, o1) = (before.class_iou(Class::Opyc), after.class_iou(Class::Opyc));
    let summary = format!("OPyC IoU {o0:.4} -> {o1:.4}, mIoU {:.4} -> {:.4}", before.miou, after.miou);
    ensure!(o1 > o0 && after.miou > before.miou, "{summary}");
    Ok(summary)
}

fn criterion_9b(dir: &Path) -> Check {
    let cfg: PipelineConfig = ok(serde_json::from_value(json!({
        "seed": 21,
        "stage2": {"data": {"synth": {"profile": "agr2like", "count": 12, "seed": 1}}, "epochs": 2},
        "stage3": {"data": {"synth": {"profile": "agr567like", "count": 20, "seed": 2}}, "epochs": 2},
        "meta": {"epochs": 2, "batch_size": 4}
    })))?;
    let runs = [dir.join("run-a"), dir.join("run-b")];
    for r in &runs {
        ok(run_pipeline(&cfg, r, &PipelineOptions::default()))?;
    }
    let mut compared = BTreeSet::new();
    for entry in ok(std::fs::read_dir(runs[0].join("reports")))? {
        let name = ok(entry)?.file_name();
        let read = |r: &Path| std::fs::read_to_string(r.join("reports").join(&name)).map_err(|e| e.to_string());
        let a = read(&runs[0])?;
        let b = read(&runs[1])?.replace(&runs[1].display().to_string(), &runs[0].display().to_string());
        ensure!(a == b, "report {} differs between identical runs", name.to_string_lossy());
        compared.insert(name.to_string_lossy().into_owned());
    }
    for stage in ["stage2", "stage3", "meta"] {
        let losses = |r: &Path| -> std::result::Result<Vec<f64>, String> {
            let lines = ok(strataseg_nn::trainer::TrainLog::read(&r.join("logs").join(format!("{stage}.jsonl"))))?;
            Ok(lines
                .into_iter()
                .filter_map(|l| match l {
                    strataseg_nn::trainer::LogLine::Epoch(e) => Some(e.train_loss),
                    _ => None,
                })
                .collect())
        };
        ensure!(losses(&runs[0])? == losses(&runs[1])?, "{stage} losses differ between identical runs");
    }
    Ok(format!("{} report files and all stage losses identical (mode exact-cpu)", compared.len()))
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let only: Option<BTreeSet<u32>> = std::env::var("STRATASEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let tmp = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<(u32, &str, Check, f64)> = Vec::new();
    let mut run = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Check| {
        if !wanted(n) {
            return;
        }
        let start = Instant::now();
        let r = f();
        let secs = start.elapsed().as_secs_f64();
        let line = match &r {
            Ok(d) => format!("criterion {n} ({name}): PASS [{secs:.1}s] {d}"),
            Err(e) => format!("criterion {n} ({name}): FAIL [{secs:.1}s] {e}"),
        };
        println!("{line}");
        results.push((n, name, r, secs));
    };

    run(1, "loss oracle equivalence", &mut criterion_1);
    run(2, "gradient checks", &mut criterion_2);
    run(3, "metric oracle equivalence", &mut criterion_3);
    run(4, "soft-label contract", &mut criterion_4);
    run(5, "architecture invariants", &mut criterion_5);
    let mut trained = None;
    let dir = tmp.path().to_path_buf();
    if wanted(6) || wanted(8) || wanted(9) {
        run(6, "desk-scale segmentation training", &mut || criterion_6(&dir, &mut trained));
    }
    run(7, "fine-tuning direction", &mut || criterion_7(&dir));
    let mut freeze = None;
    run(8, "meta-model detection", &mut || {
        let (detect, f) = criterion_8_and_9a(&dir, trained.as_ref());
        freeze = Some(f);
        detect
    });
    run(9, "freeze and determinism", &mut || {
        let f = freeze.take().unwrap_or_else(|| criterion_8_and_9a(&dir, trained.as_ref()).1);
        f.and_then(|f| criterion_9b(&dir).map(|d| format!("{f}; {d}")))
    });

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
