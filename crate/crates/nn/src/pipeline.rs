//! End-to-end run: backbone init, related-domain training, target fine-tuning,
//! meta-model training and a final test-split evaluation.
//!
//! Artifacts layout under the run directory:
//! `checkpoints/`, `logs/` (one JSON-lines file per stage), `reports/`, `data/`
//! (generated datasets) and `state.json` (completed stages, for resuming).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use strataseg_core::dataio::{load_split, AugmentPolicy, LoaderOptions};
use strataseg_core::metrics::{write_json, write_seg_csv, write_seg_table_csv, write_uq_csv, Calibration, SegMetricsReport, UqMetricsReport};
use strataseg_core::synthgen::{generate_dataset, sample_seed, CanvasSize, DatasetManifest, DomainProfile, Split, SplitFractions, MANIFEST_FILE};
use strataseg_core::ImageSample;

use crate::checkpoint::{read_checkpoint, save_segnet, CheckpointMeta, ModelKind};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_segmentation, evaluate_uq, meta_items};
use crate::losses::WfmseParams;
use crate::metanet::{MetaModelConfig, MetaNet};
use crate::segnet::{SegModelConfig, SegNet};
use crate::tensor::Normalization;
use crate::trainer::{init_backbone, train_meta, train_segmentation, BackboneInit, Stage, StageConfig, StageOutput};

pub const STATE_FILE: &str = "state.json";

/// Report labels.
pub const LABEL_WITHOUT_FT: &str = "w/o FT";
pub const LABEL_WITH_FT: &str = "w/ FT";
pub const LABEL_NO_STAGE2: &str = "w/o FT-stage2";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    #[default]
    Tiny,
    Full,
}

impl ModelPreset {
    pub fn segmentation(self, size: usize) -> SegModelConfig {
        match self {
            ModelPreset::Tiny => SegModelConfig::tiny(),
            ModelPreset::Full => SegModelConfig::resnet152_like(),
        }
        .with_input_size(size)
    }

    pub fn meta(self, size: usize) -> MetaModelConfig {
        match self {
            ModelPreset::Tiny => MetaModelConfig::tiny(),
            ModelPreset::Full => MetaModelConfig::standard(),
        }
        .with_input_size(size)
    }
}

/// A dataset given by manifest or generated on first use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSpec {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub profile: String,
    pub count: usize,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to train-only for stage 2 and the standard split otherwise.
    #[serde(default)]
    pub fractions: Option<SplitFractions>,
    #[serde(default = "yes")]
    pub defects: bool,
    /// Canvas side; defaults to the pipeline input size.
    #[serde(default)]
    pub canvas: Option<usize>,
}

fn yes() -> bool {
    true
}

/// Segmentation stage block; unset fields keep the stage defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegStageSpec {
    pub data: DataSpec,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub augment: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaStageSpec {
    /// Defaults to the stage-3 dataset.
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub epochs: Option<usize>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub wfmse: WfmseParams,
}

fn default_input_size() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub model: ModelPreset,
    #[serde(default = "random_init")]
    pub init: BackboneInit,
    #[serde(default)]
    pub stage2: Option<SegStageSpec>,
    pub stage3: SegStageSpec,
    #[serde(default)]
    pub meta: MetaStageSpec,
    /// Ablation: train stage 3 directly from the initialized backbone.
    #[serde(default)]
    pub skip_stage2: bool,
    /// Fixed detection threshold instead of validation calibration.
    #[serde(default)]
    pub tau: Option<f64>,
}

fn random_init() -> BackboneInit {
    BackboneInit::Random
}

impl PipelineConfig {
    /// Reads a JSON config; relative dataset paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: PipelineConfig = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |d: &mut DataSpec| {
            if let DataSpec::Manifest(p) = d {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        if let Some(s) = &mut self.stage2 {
            fix(&mut s.data);
        }
        fix(&mut self.stage3.data);
        if let Some(d) = &mut self.meta.data {
            fix(d);
        }
        if let BackboneInit::External { path } = &mut self.init {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.skip_stage2 && self.stage2.is_none() {
            return Err(Error::Config("stage2 block missing (set skip_stage2 to run without it)".into()));
        }
        self.model.segmentation(self.input_size).validate()?;
        self.model.meta(self.input_size).validate()?;
        self.meta.wfmse.validate()?;
        if let Some(t) = self.tau {
            if !(-1.0..=1.0).contains(&t) {
                return Err(Error::Config(format!("threshold {t} outside [-1, 1]")));
            }
        }
        for stage in self.seg_stages() {
            self.stage_config(stage)?.validate()?;
        }
        self.stage_config(Stage::Meta)?.validate()
    }

    /// Segmentation stages that will run, in order.
    pub fn seg_stages(&self) -> Vec<Stage> {
        if self.skip_stage2 {
            vec![Stage::Stage3]
        } else {
            vec![Stage::Stage2, Stage::Stage3]
        }
    }

    /// Stage defaults with this config's overrides and a seed derived from the run seed.
    pub fn stage_config(&self, stage: Stage) -> Result<StageConfig> {
        let seed = sample_seed(self.seed, stage.index());
        let mut cfg = match stage {
            Stage::Stage2 | Stage::Stage3 => {
                let spec = self.seg_spec(stage)?;
                let mut c = StageConfig::segmentation(stage);
                c.epochs = spec.epochs.unwrap_or(c.epochs);
                c.lr = spec.lr.unwrap_or(c.lr);
                c.batch_size = spec.batch_size.unwrap_or(c.batch_size);
                if let Some(on) = spec.augment {
                    c.augment = on.then(AugmentPolicy::default);
                }
                c
            }
            Stage::Meta => {
                let mut c = StageConfig::meta();
                c.epochs = self.meta.epochs.unwrap_or(c.epochs);
                c.lr = self.meta.lr.unwrap_or(c.lr);
                c.batch_size = self.meta.batch_size.unwrap_or(c.batch_size);
                c
            }
            Stage::Stage1 => return Err(Error::Config("stage 1 has no training loop".into())),
        };
        cfg.seed = seed;
        Ok(cfg)
    }

    fn seg_spec(&self, stage: Stage) -> Result<&SegStageSpec> {
        match stage {
            Stage::Stage2 => self.stage2.as_ref().ok_or_else(|| Error::Config("no stage2 block".into())),
            Stage::Stage3 => Ok(&self.stage3),
            other => Err(Error::Config(format!("{other} is not a segmentation stage"))),
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Resume bookkeeping written after every completed stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineState {
    pub config_hash: String,
    pub completed: Vec<Stage>,
    pub normalization: Option<Normalization>,
}

impl PipelineState {
    fn load_or_new(dir: &Path, hash: &str) -> Result<Self> {
        let path = dir.join(STATE_FILE);
        if !path.exists() {
            return Ok(PipelineState {
                config_hash: hash.to_string(),
                completed: Vec::new(),
                normalization: None,
            });
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: PipelineState = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if state.config_hash != hash {
            return Err(Error::Config(format!(
                "{} belongs to a run with a different config; use a fresh artifacts directory",
                path.display()
            )));
        }
        Ok(state)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(STATE_FILE), self)?;
        Ok(())
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.completed.contains(&stage)
    }
}

#[derive(Debug, Clone, Default)]
pub struct PipelineOptions {
    /// Stop with `Error::Interrupted` once this stage has completed.
    pub stop_after: Option<Stage>,
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub segmentation: Vec<(String, SegMetricsReport)>,
    pub uq: UqMetricsReport,
    pub calibration: Option<Calibration>,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub reports_dir: PathBuf,
}

/// Report file stem for a row label.
pub fn report_slug(label: &str) -> String {
    match label {
        LABEL_WITHOUT_FT => "without_ft".into(),
        LABEL_WITH_FT => "with_ft".into(),
        LABEL_NO_STAGE2 => "without_ft_stage2".into(),
        other => other
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect(),
    }
}

fn resolve_data(spec: &DataSpec, dir: &Path, default_fractions: SplitFractions, size: usize) -> Result<DatasetManifest> {
    match spec {
        DataSpec::Manifest(p) => Ok(DatasetManifest::load(p)?),
        DataSpec::Synth(s) => {
            let existing = dir.join(MANIFEST_FILE);
            if existing.exists() {
                return Ok(DatasetManifest::load(&existing)?);
            }
            let mut profile = DomainProfile::by_name(&s.profile)?;
            if !s.defects {
                profile = profile.without_defects();
            }
            let fractions = s.fractions.unwrap_or(default_fractions);
            Ok(generate_dataset(
                &profile,
                s.count,
                fractions,
                s.seed,
                CanvasSize::square(s.canvas.unwrap_or(size)),
                dir,
            )?)
        }
    }
}

/// Channel statistics of a manifest's training split at model resolution.
pub fn dataset_normalization(manifest: &DatasetManifest, size: usize) -> Result<Normalization> {
    let loader = load_split(manifest, Split::Train, 16, 0, LoaderOptions::eval(size))?;
    let mut images = Vec::with_capacity(loader.len());
    for batch in loader.epoch(0) {
        images.extend(batch?.samples);
    }
    Normalization::from_images(images.iter().map(ImageSample::image))
}

fn save_seg_report(dir: &Path, label: &str, r: &SegMetricsReport) -> Result<()> {
    let slug = report_slug(label);
    write_json(&dir.join(format!("seg_{slug}.json")), r)?;
    write_seg_csv(&dir.join(format!("seg_{slug}.csv")), r)?;
    Ok(())
}

fn load_seg_report(dir: &Path, label: &str) -> Result<SegMetricsReport> {
    let path = dir.join(format!("seg_{}.json", report_slug(label)));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Runs (or resumes) the full pipeline in `dir`.
pub fn run_pipeline(cfg: &PipelineConfig, dir: &Path, opts: &PipelineOptions) -> Result<PipelineResult> {
    cfg.validate()?;
    let ck_dir = dir.join("checkpoints");
    let log_dir = dir.join("logs");
    let rep_dir = dir.join("reports");
    for d in [&ck_dir, &log_dir, &rep_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut state = PipelineState::load_or_new(dir, &cfg.hash())?;
    let size = cfg.input_size;

    let mut data = BTreeMap::new();
    for stage in cfg.seg_stages() {
        let fractions = if stage == Stage::Stage2 {
            SplitFractions::train_only()
        } else {
            SplitFractions::standard()
        };
        let spec = &cfg.seg_spec(stage)?.data;
        data.insert(stage, resolve_data(spec, &dir.join("data").join(stage.as_str()), fractions, size)?);
    }
    let meta_data = match &cfg.meta.data {
        Some(spec) => resolve_data(spec, &dir.join("data").join("meta"), SplitFractions::standard(), size)?,
        None => data[&Stage::Stage3].clone(),
    };
    let target = &data[&Stage::Stage3];

    let mut checkpoints = BTreeMap::new();
    let provenance = json!({"config_hash": state.config_hash, "seed": cfg.seed});
    let seg = SegNet::new(cfg.model.segmentation(size), cfg.seed, DType::F32)?;
    let out = |stage: Stage| {
        let mut o = StageOutput::new(&ck_dir, stage.as_str());
        o.log = Some(log_dir.join(format!("{}.jsonl", stage.as_str())));
        o.verbose = opts.verbose;
        o
    };
    let finish = |state: &mut PipelineState, stage: Stage| -> Result<()> {
        state.completed.push(stage);
        state.save(dir)?;
        if opts.stop_after == Some(stage) {
            return Err(Error::Interrupted(stage.to_string()));
        }
        Ok(())
    };

    // Stage 1: encoder initialization and input normalization.
    let stage1 = out(Stage::Stage1).checkpoint();
    let norm = if state.is_done(Stage::Stage1) {
        seg.store().load(&read_checkpoint(&stage1)?.1, true)?;
        state
            .normalization
            .ok_or_else(|| Error::Config("resume state lacks the normalization".into()))?
    } else {
        let first = &data[&cfg.seg_stages()[0]];
        let data_norm = dataset_normalization(first, size)?;
        let outcome = init_backbone(&seg, &cfg.init, cfg.seed, &data_norm)?;
        let norm = outcome.normalization.unwrap_or(data_norm);
        let mut meta = CheckpointMeta::new(ModelKind::Segmentation, json!(null));
        meta.normalization = Some(norm);
        meta.provenance = json!({"init": outcome.provenance, "run": provenance});
        save_segnet(&stage1, &seg, meta)?;
        state.normalization = Some(norm);
        finish(&mut state, Stage::Stage1)?;
        norm
    };
    checkpoints.insert(Stage::Stage1.to_string(), stage1);

    let mut rows = Vec::new();
    for stage in cfg.seg_stages() {
        let o = out(stage);
        if state.is_done(stage) {
            seg.store().load(&read_checkpoint(&o.checkpoint())?.1, true)?;
        } else {
            let mut base = CheckpointMeta::new(ModelKind::Segmentation, json!(null));
            base.provenance = json!({"stage": stage, "run": provenance});
            train_segmentation(&seg, &norm, &data[&stage], &cfg.stage_config(stage)?, &o, base)?;
        }
        let label = match (stage, cfg.skip_stage2) {
            (Stage::Stage2, _) => LABEL_WITHOUT_FT,
            (_, true) => LABEL_NO_STAGE2,
            _ => LABEL_WITH_FT,
        };
        let report = if state.is_done(stage) {
            load_seg_report(&rep_dir, label)?
        } else {
            let test = load_split(target, Split::Test, 4, 0, LoaderOptions::eval(size))?;
            let r = evaluate_segmentation(&seg, &norm, &test)?;
            save_seg_report(&rep_dir, label, &r)?;
            finish(&mut state, stage)?;
            r
        };
        rows.push((label.to_string(), report));
        checkpoints.insert(stage.to_string(), o.checkpoint());
    }
    let table: Vec<(String, &SegMetricsReport)> = rows.iter().map(|(l, r)| (l.clone(), r)).collect();
    write_seg_table_csv(&rep_dir.join("seg_table.csv"), &table)?;

    // Meta stage on the frozen fine-tuned model.
    let meta = MetaNet::new(cfg.model.meta(size), sample_seed(cfg.seed, Stage::Meta.index()), DType::F32)?;
    let o = out(Stage::Meta);
    if state.is_done(Stage::Meta) {
        meta.store().load(&read_checkpoint(&o.checkpoint())?.1, true)?;
    } else {
        let mut base = CheckpointMeta::new(ModelKind::Meta, json!(null));
        base.provenance = json!({"segmentation": checkpoints[&Stage::Stage3.to_string()], "run": provenance});
        train_meta(&seg, &norm, &meta, &meta_data, &cfg.stage_config(Stage::Meta)?, &cfg.meta.wfmse, &o, base)?;
    }
    checkpoints.insert(Stage::Meta.to_string(), o.checkpoint());
    let val = load_split(&meta_data, Split::Val, 8, 0, LoaderOptions::eval(size))?;
    let test = load_split(&meta_data, Split::Test, 8, 0, LoaderOptions::eval(size))?;
    let val_items = meta_items(&seg, &norm, &val, &cfg.meta.wfmse)?;
    let test_items = meta_items(&seg, &norm, &test, &cfg.meta.wfmse)?;
    let (uq, calibration) = evaluate_uq(&meta, &val_items, &test_items, cfg.tau)?;
    write_json(&rep_dir.join("uq.json"), &uq)?;
    write_uq_csv(&rep_dir.join("uq.csv"), &uq)?;
    if let Some(c) = &calibration {
        write_json(&rep_dir.join("calibration.json"), c)?;
    }
    let seg_summary: BTreeMap<&str, &SegMetricsReport> = rows.iter().map(|(l, r)| (l.as_str(), r)).collect();
    write_json(
        &rep_dir.join("summary.json"),
        &json!({"segmentation": seg_summary, "uq": uq, "tau": uq.tau, "checkpoints": checkpoints}),
    )?;
    if !state.is_done(Stage::Meta) {
        finish(&mut state, Stage::Meta)?;
    }
    Ok(PipelineResult {
        segmentation: rows,
        uq,
        calibration,
        checkpoints,
        reports_dir: rep_dir,
    })
}
