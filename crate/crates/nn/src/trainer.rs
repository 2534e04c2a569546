//! Backbone initialization, segmentation training and frozen-model meta training.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use strataseg_core::dataio::{load_split, AugmentPolicy, LoaderOptions};
use strataseg_core::metrics::{average_precision, Positive};
use strataseg_core::synthgen::{generate_sample, sample_seed, CanvasSize, DatasetManifest, DomainProfile, Split};
use strataseg_core::{ImageSample, LabelMask, ProbabilityMap, NUM_CLASSES};

use crate::checkpoint::{load_backbone_into, read_checkpoint, save_metanet, save_segnet, CheckpointMeta, ModelKind};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_segmentation, meta_items, score_items, MetaItem};
use crate::layers::{softmax_channels, Ctx};
use crate::losses::{dice_loss_tensor, wfmse_loss_tensor, WfmseParams};
use crate::metanet::MetaNet;
use crate::params::{Init, ParamStore};
use crate::scheduler::{PlateauConfig, PlateauScheduler};
use crate::segnet::{SegNet, BACKBONE_PREFIX};
use crate::tensor::{fields_to_tensor, images_to_tensor, masks_to_onehot, probs_to_tensor, soft_to_tensor, Normalization};

/// How losses are reproduced across runs on this backend.
pub const DETERMINISM_MODE: &str = "exact-cpu";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
    Meta,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::Stage2 => "stage2",
            Stage::Stage3 => "stage3",
            Stage::Meta => "meta",
        }
    }

    pub fn index(self) -> u64 {
        match self {
            Stage::Stage1 => 1,
            Stage::Stage2 => 2,
            Stage::Stage3 => 3,
            Stage::Meta => 4,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "stage1" => Ok(Stage::Stage1),
            "2" | "stage2" => Ok(Stage::Stage2),
            "3" | "stage3" => Ok(Stage::Stage3),
            "meta" => Ok(Stage::Meta),
            other => Err(Error::Config(format!("unknown stage {other:?} (expected 1, 2, 3 or meta)"))),
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    /// Adam learning rate at epoch 1.
    pub lr: f64,
    pub batch_size: usize,
    pub plateau: PlateauConfig,
    pub augment: Option<AugmentPolicy>,
    /// Drives shuffling and augmentation.
    pub seed: u64,
}

impl StageConfig {
    pub fn segmentation(stage: Stage) -> Self {
        StageConfig {
            stage,
            epochs: 50,
            lr: 1e-3,
            batch_size: 4,
            plateau: PlateauConfig::default(),
            augment: Some(AugmentPolicy::default()),
            seed: 0,
        }
    }

    pub fn meta() -> Self {
        StageConfig {
            stage: Stage::Meta,
            epochs: 50,
            lr: 1e-4,
            batch_size: 16,
            plateau: PlateauConfig::default(),
            augment: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        self.plateau.validate()?;
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn summary(&self) -> Value {
        json!({
            "stage": self.stage,
            "epochs": self.epochs,
            "lr": self.lr,
            "batch_size": self.batch_size,
            "optimizer": "adam",
            "plateau": self.plateau,
            "augment": self.augment.is_some(),
            "seed": self.seed,
        })
    }
}

/// One line of a training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "lowercase")]
pub enum LogLine {
    Start {
        stage: Stage,
        config: Value,
        determinism: String,
        grad_accumulation: usize,
    },
    Epoch(EpochRecord),
    End {
        stage: Stage,
        best_epoch: usize,
        checkpoint: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val: BTreeMap<String, f64>,
    /// Set when this epoch's weights were written as the stage's best.
    pub checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

/// Per-epoch history of a stage, mirrored to a JSON-lines file when a path is given.
#[derive(Debug, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    file: Option<(PathBuf, File)>,
}

impl TrainLog {
    pub fn open(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = OpenOptions::new()
                    .create(true)
                    .write(true)
                    .truncate(true)
                    .open(p)
                    .map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), f))
            }
            None => None,
        };
        Ok(TrainLog { epochs: Vec::new(), file })
    }

    fn write(&mut self, line: &LogLine) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            let mut text = serde_json::to_string(line).map_err(|e| Error::json(path.as_path(), e))?;
            text.push('\n');
            f.write_all(text.as_bytes()).map_err(|e| Error::io(path.as_path(), e))?;
            f.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    fn push(&mut self, rec: EpochRecord) -> Result<()> {
        self.write(&LogLine::Epoch(rec.clone()))?;
        self.epochs.push(rec);
        Ok(())
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }

    pub fn read(path: &Path) -> Result<Vec<LogLine>> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::json(path, e)))
            .collect()
    }
}

/// Where a stage writes its outputs.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint_dir: PathBuf,
    pub log: Option<PathBuf>,
    /// File stem of the stage's checkpoint.
    pub name: String,
    pub verbose: bool,
}

impl StageOutput {
    pub fn new(checkpoint_dir: impl Into<PathBuf>, name: impl Into<String>) -> Self {
        StageOutput {
            checkpoint_dir: checkpoint_dir.into(),
            log: None,
            name: name.into(),
            verbose: false,
        }
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join(format!("{}.safetensors", self.name))
    }

    pub fn diagnostic_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join(format!("{}-diverged.safetensors", self.name))
    }

    fn report(&self, stage: Stage, rec: &EpochRecord) {
        if self.verbose {
            let val: Vec<String> = rec.val.iter().map(|(k, v)| format!("{k} {v:.4}")).collect();
            eprintln!(
                "[{stage}] epoch {:>3}  loss {:.5}  lr {:.1e}  {}  {:.1}s",
                rec.epoch,
                rec.train_loss,
                rec.lr,
                val.join("  "),
                rec.wall_time_s
            );
        }
    }
}

fn optimizer(vars: Vec<candle_core::Var>, lr: f64) -> Result<AdamW> {
    // Adam: AdamW without decoupled weight decay.
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Debug)]
pub struct SegTrainResult {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_miou: Option<f64>,
    pub log: TrainLog,
}

/// Trains the whole segmentation model with the Dice loss.
///
/// The manifest's validation split, when non-empty, selects the best epoch by mIoU;
/// otherwise the final epoch is kept. On return `net` holds the selected weights.
pub fn train_segmentation(
    net: &SegNet,
    norm: &Normalization,
    manifest: &DatasetManifest,
    cfg: &StageConfig,
    out: &StageOutput,
    base: CheckpointMeta,
) -> Result<SegTrainResult> {
    cfg.validate()?;
    norm.validate()?;
    let size = net.config().input_size;
    let train = load_split(manifest, Split::Train, cfg.batch_size, cfg.seed, LoaderOptions::train(size, cfg.augment.clone()))?;
    let val = if manifest.split_len(Split::Val) > 0 {
        Some(load_split(manifest, Split::Val, cfg.batch_size, cfg.seed, LoaderOptions::eval(size))?)
    } else {
        None
    };
    let mut log = TrainLog::open(out.log.as_deref())?;
    log.write(&LogLine::Start {
        stage: cfg.stage,
        config: cfg.summary(),
        determinism: DETERMINISM_MODE.into(),
        grad_accumulation: 1,
    })?;

    let mut meta = base;
    meta.kind = ModelKind::Segmentation;
    meta.normalization = Some(*norm);
    meta.train = cfg.summary();
    let mut opt = optimizer(net.store().trainable_vars(), cfg.lr)?;
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau)?;
    let ckpt = out.checkpoint();
    let mut best: Option<(usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr();
        opt.set_learning_rate(lr);
        let (mut total, mut batches) = (0.0, 0usize);
        for batch in train.epoch(epoch as u64) {
            let batch = batch?;
            let images: Vec<_> = batch.samples.iter().map(ImageSample::image).collect();
            let masks: Vec<&LabelMask> = batch.samples.iter().map(ImageSample::mask).collect();
            let x = images_to_tensor(&images, norm, net.dtype())?;
            let y = masks_to_onehot(&masks, net.config().num_classes, net.dtype())?;
            let probs = softmax_channels(&net.forward(&x, Ctx::TRAIN)?)?;
            let loss = dice_loss_tensor(&probs, &y)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                let diag = out.diagnostic_checkpoint();
                let mut m = meta.clone();
                m.provenance = json!({"diverged": {"epoch": epoch, "batch": batches, "loss": value.to_string()}, "base": meta.provenance});
                save_segnet(&diag, net, m)?;
                return Err(Error::Divergence {
                    stage: cfg.stage.to_string(),
                    epoch,
                    loss: value,
                    checkpoint: diag,
                });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;

        let mut val_metrics = BTreeMap::new();
        let improved = match &val {
            Some(v) => {
                let r = evaluate_segmentation(net, norm, v)?;
                val_metrics.insert("miou".to_string(), r.miou);
                val_metrics.insert("mp".to_string(), r.mp);
                best.is_none_or(|(_, b)| r.miou > b).then_some(r.miou)
            }
            None => (epoch == cfg.epochs).then_some(f64::NAN),
        };
        let mut saved = None;
        if let Some(score) = improved {
            best = Some((epoch, score));
            let mut m = meta.clone();
            m.train["epoch"] = json!(epoch);
            save_segnet(&ckpt, net, m)?;
            saved = Some(ckpt.clone());
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            lr,
            val: val_metrics,
            checkpoint: saved,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        out.report(cfg.stage, &rec);
        log.push(rec)?;
        sched.step(train_loss);
    }

    let (best_epoch, score) = best.expect("at least one epoch saved");
    log.write(&LogLine::End {
        stage: cfg.stage,
        best_epoch,
        checkpoint: ckpt.clone(),
    })?;
    let (_, tensors) = read_checkpoint(&ckpt)?;
    net.store().load(&tensors, true)?;
    Ok(SegTrainResult {
        checkpoint: ckpt,
        best_epoch,
        best_miou: (!score.is_nan()).then_some(score),
        log,
    })
}

#[derive(Debug)]
pub struct MetaTrainResult {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_ap_e: Option<f64>,
    pub seg_checksum: String,
    pub log: TrainLog,
}

/// Validation AP-E, or `None` when the split has no misclassified pixels.
pub fn validation_ap_e(meta: &MetaNet, items: &[MetaItem]) -> Result<Option<f64>> {
    let s = score_items(meta, items, 8)?;
    match average_precision(&s.predicted, &s.correct, Positive::Incorrect) {
        Ok(v) => Ok(Some(v)),
        Err(strataseg_core::Error::UndefinedMetric { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains the meta-model on the outputs of a frozen segmentation model and keeps
/// the epoch with the highest validation AP-E.
#[allow(clippy::too_many_arguments)]
pub fn train_meta(
    seg: &SegNet,
    seg_norm: &Normalization,
    meta: &MetaNet,
    manifest: &DatasetManifest,
    cfg: &StageConfig,
    wfmse: &WfmseParams,
    out: &StageOutput,
    base: CheckpointMeta,
) -> Result<MetaTrainResult> {
    cfg.validate()?;
    wfmse.validate()?;
    if cfg.augment.is_some() {
        return Err(Error::Config("the meta stage trains without augmentation".into()));
    }
    if meta.config().input_size != seg.config().input_size || meta.config().in_channels != seg.config().num_classes {
        return Err(Error::Config(format!(
            "meta model expects {}x{} inputs with {} channels; segmentation model produces {}x{} with {}",
            meta.config().input_size,
            meta.config().input_size,
            meta.config().in_channels,
            seg.config().input_size,
            seg.config().input_size,
            seg.config().num_classes
        )));
    }
    if manifest.split_len(Split::Val) == 0 {
        return Err(Error::Config("meta training needs a validation split".into()));
    }
    let before = seg.store().checksum()?;
    let size = seg.config().input_size;

    // Segmentation outputs do not change while the model is frozen, so they are computed once.
    let train_loader = load_split(manifest, Split::Train, cfg.batch_size, cfg.seed, LoaderOptions::eval(size))?;
    let val_loader = load_split(manifest, Split::Val, cfg.batch_size, cfg.seed, LoaderOptions::eval(size))?;
    let train_items = meta_items(seg, seg_norm, &train_loader, wfmse)?;
    let val_items = meta_items(seg, seg_norm, &val_loader, wfmse)?;

    let mut log = TrainLog::open(out.log.as_deref())?;
    let mut summary = cfg.summary();
    summary["wfmse"] = json!(wfmse);
    summary["seg_checksum"] = json!(before);
    log.write(&LogLine::Start {
        stage: cfg.stage,
        config: summary.clone(),
        determinism: DETERMINISM_MODE.into(),
        grad_accumulation: 1,
    })?;
    let mut ck_meta = base;
    ck_meta.kind = ModelKind::Meta;
    ck_meta.normalization = Some(*seg_norm);
    ck_meta.train = summary;

    let mut opt = optimizer(meta.store().trainable_vars(), cfg.lr)?;
    let mut sched = PlateauScheduler::new(cfg.lr, cfg.plateau)?;
    let ckpt = out.checkpoint();
    let mut best: Option<(usize, f64)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_items.len()).collect();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let lr = sched.lr();
        opt.set_learning_rate(lr);
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<&MetaItem> = chunk.iter().map(|&i| &train_items[i]).collect();
            let probs: Vec<&ProbabilityMap> = items.iter().map(|i| &i.probs).collect();
            let x = probs_to_tensor(&probs, meta.dtype())?;
            let u = soft_to_tensor(&items.iter().map(|i| &i.target).collect::<Vec<_>>(), meta.dtype())?;
            let w = fields_to_tensor(&items.iter().map(|i| &i.weights).collect::<Vec<_>>(), meta.dtype())?;
            let u_hat = meta.forward(&x, Ctx::TRAIN)?;
            let loss = wfmse_loss_tensor(&u, &u_hat, &w, wfmse)?;
            let value = scalar(&loss)?;
            if !value.is_finite() {
                let diag = out.diagnostic_checkpoint();
                save_metanet(&diag, meta, ck_meta.clone())?;
                return Err(Error::Divergence {
                    stage: cfg.stage.to_string(),
                    epoch,
                    loss: value,
                    checkpoint: diag,
                });
            }
            opt.backward_step(&loss)?;
            total += value;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        let ap_e = validation_ap_e(meta, &val_items)?;
        let score = ap_e.unwrap_or(f64::NEG_INFINITY);
        let mut val = BTreeMap::new();
        if let Some(v) = ap_e {
            val.insert("ap_e".to_string(), v);
        }
        let mut saved = None;
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((epoch, score));
            let mut m = ck_meta.clone();
            m.train["epoch"] = json!(epoch);
            save_metanet(&ckpt, meta, m)?;
            saved = Some(ckpt.clone());
        }
        let rec = EpochRecord {
            epoch,
            train_loss,
            lr,
            val,
            checkpoint: saved,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        out.report(cfg.stage, &rec);
        log.push(rec)?;
        sched.step(train_loss);
    }

    let after = seg.store().checksum()?;
    if after != before {
        return Err(Error::FreezeViolation { before, after });
    }
    let (best_epoch, score) = best.expect("at least one epoch");
    log.write(&LogLine::End {
        stage: cfg.stage,
        best_epoch,
        checkpoint: ckpt.clone(),
    })?;
    let (_, tensors) = read_checkpoint(&ckpt)?;
    meta.store().load(&tensors, true)?;
    Ok(MetaTrainResult {
        checkpoint: ckpt,
        best_epoch,
        best_ap_e: score.is_finite().then_some(score),
        seg_checksum: after,
        log,
    })
}

/// Source of the encoder weights before segmentation training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BackboneInit {
    /// Seeded random initialization.
    Random,
    /// A backbone checkpoint with matching layout.
    External { path: PathBuf },
    /// Patch classification on freshly generated synthetic images.
    SyntheticPretrain(PretrainConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub profile: String,
    pub canvas: usize,
    pub images: usize,
    pub patches_per_image: usize,
    pub patch: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Fraction of images whose patches are held out for the accuracy estimate.
    pub holdout: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            profile: "agr567like".into(),
            canvas: 64,
            images: 48,
            patches_per_image: 24,
            patch: 32,
            epochs: 4,
            lr: 1e-3,
            batch_size: 32,
            holdout: 0.25,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.images < 2 || self.patches_per_image == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining needs at least 2 images, 1 patch, 1 epoch and batch 1".into()));
        }
        if self.patch < 8 || self.patch > self.canvas {
            return Err(Error::Config(format!("patch size {} must be in [8, {}]", self.patch, self.canvas)));
        }
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::Config("holdout fraction must be in (0, 1)".into()));
        }
        DomainProfile::by_name(&self.profile)?;
        Ok(())
    }
}

/// What `init_backbone` did.
#[derive(Debug, Clone, PartialEq)]
pub struct InitOutcome {
    pub provenance: Value,
    /// Normalization the weights expect, when the source defines one.
    pub normalization: Option<Normalization>,
    /// Held-out patch accuracy of synthetic pretraining.
    pub accuracy: Option<f64>,
}

/// Prepares the encoder of `net` according to `init`.
pub fn init_backbone(net: &SegNet, init: &BackboneInit, seed: u64, norm: &Normalization) -> Result<InitOutcome> {
    match init {
        BackboneInit::Random => Ok(InitOutcome {
            provenance: json!({"kind": "random", "seed": seed}),
            normalization: None,
            accuracy: None,
        }),
        BackboneInit::External { path } => {
            let meta = load_backbone_into(path, net)?;
            Ok(InitOutcome {
                provenance: json!({"kind": "external", "path": path, "source": meta.provenance}),
                normalization: Some(meta.normalization.unwrap_or_else(Normalization::imagenet)),
                accuracy: None,
            })
        }
        BackboneInit::SyntheticPretrain(cfg) => {
            let accuracy = pretrain_backbone(net, cfg, norm)?;
            Ok(InitOutcome {
                provenance: json!({"kind": "synthetic-pretrain", "config": cfg, "patch_accuracy": accuracy}),
                normalization: None,
                accuracy: Some(accuracy),
            })
        }
    }
}

struct Patch {
    image: ndarray::Array3<f32>,
    label: u32,
}

/// Crops patches centered on pixels of a uniformly chosen class.
fn sample_patches(sample: &ImageSample, patch: usize, count: usize, rng: &mut impl Rng) -> Vec<Patch> {
    let (h, w) = sample.mask().dim();
    let half = patch / 2;
    let mut by_class: Vec<Vec<(usize, usize)>> = vec![Vec::new(); NUM_CLASSES];
    for r in half..h + half - patch + 1 {
        for c in half..w + half - patch + 1 {
            by_class[sample.mask().as_array()[[r, c]] as usize].push((r, c));
        }
    }
    let present: Vec<usize> = (0..NUM_CLASSES).filter(|&k| !by_class[k].is_empty()).collect();
    (0..count)
        .map(|_| {
            let class = *present.choose(rng).expect("some class is present");
            let &(r, c) = by_class[class].choose(rng).expect("non-empty");
            let image = sample
                .image()
                .slice(ndarray::s![r - half..r - half + patch, c - half..c - half + patch, ..])
                .to_owned();
            Patch {
                image,
                label: class as u32,
            }
        })
        .collect()
}

fn patch_logits(net: &SegNet, head_w: &Tensor, head_b: &Tensor, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
    let feats = net.encode(x, ctx)?.bottleneck;
    let pooled = feats.mean((2, 3))?;
    Ok(pooled.matmul(&head_w.t()?)?.broadcast_add(head_b)?)
}

/// Trains the encoder (plus a throwaway linear head) to classify the class at each
/// patch center. Returns held-out accuracy.
pub fn pretrain_backbone(net: &SegNet, cfg: &PretrainConfig, norm: &Normalization) -> Result<f64> {
    cfg.validate()?;
    let profile = DomainProfile::by_name(&cfg.profile)?;
    let canvas = CanvasSize::square(cfg.canvas);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, u64::MAX));
    let holdout_images = ((cfg.images as f64 * cfg.holdout).round() as usize).clamp(1, cfg.images - 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for i in 0..cfg.images {
        let sample = generate_sample(&profile, canvas, sample_seed(cfg.seed, i as u64))?;
        let patches = sample_patches(&sample, cfg.patch, cfg.patches_per_image, &mut rng);
        if i < cfg.images - holdout_images {
            train.extend(patches);
        } else {
            test.extend(patches);
        }
    }

    let features = net.config().backbone.layout().bottleneck_channels();
    let head = ParamStore::new(sample_seed(cfg.seed, 1), net.dtype());
    let hp = head.root().pp("pretrain_head");
    let bound = 1.0 / (features as f64).sqrt();
    let head_w = hp.param("weight", &[NUM_CLASSES, features], Init::Uniform { bound }, true)?;
    let head_b = hp.param("bias", &[NUM_CLASSES], Init::Const(0.0), true)?;
    let mut vars = net.store().trainable_vars_under(&format!("{BACKBONE_PREFIX}."));
    vars.extend(head.trainable_vars());
    let mut opt = optimizer(vars, cfg.lr)?;

    let to_batch = |patches: &[&Patch]| -> Result<(Tensor, Tensor)> {
        let images: Vec<_> = patches.iter().map(|p| &p.image).collect();
        let x = images_to_tensor(&images, norm, net.dtype())?;
        let y = Tensor::from_vec(patches.iter().map(|p| p.label).collect::<Vec<u32>>(), patches.len(), &Device::Cpu)?;
        Ok((x, y))
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let patches: Vec<&Patch> = chunk.iter().map(|&i| &train[i]).collect();
            let (x, y) = to_batch(&patches)?;
            let logits = patch_logits(net, head_w.as_tensor(), head_b.as_tensor(), &x, Ctx::TRAIN)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            opt.backward_step(&loss)?;
        }
    }

    let mut correct = 0usize;
    for chunk in test.chunks(cfg.batch_size) {
        let patches: Vec<&Patch> = chunk.iter().collect();
        let (x, y) = to_batch(&patches)?;
        let logits = patch_logits(net, &head_w.as_tensor().detach(), &head_b.as_tensor().detach(), &x, Ctx::EVAL)?;
        let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
        correct += pred.iter().zip(y.to_vec1::<u32>()?).filter(|(a, b)| **a == *b).count();
    }
    Ok(correct as f64 / test.len() as f64)
}
