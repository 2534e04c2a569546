use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde_json::json;
use strataseg_core::dataio::{load_mask, load_split, resize_gray, resize_mask, to_gray, LoaderOptions};
use strataseg_core::metrics::{write_json, write_seg_csv, write_seg_table_csv, write_uq_csv};
use strataseg_core::synthgen::{
    generate_dataset, save_mask_png, CanvasSize, DatasetManifest, DomainProfile, Split, SplitFractions,
    MANIFEST_FILE,
};
use strataseg_core::LabelMask;
use strataseg_nn::checkpoint::{
    load_backbone_into, load_metanet, load_segnet, read_checkpoint, CheckpointMeta, ModelKind,
};
use strataseg_nn::evaluate::{evaluate_segmentation, evaluate_uq, meta_items};
use strataseg_nn::losses::WfmseParams;
use strataseg_nn::metanet::{MetaModelConfig, MetaNet};
use strataseg_nn::pipeline::{dataset_normalization, run_pipeline, PipelineConfig, PipelineOptions};
use strataseg_nn::segnet::{SegModelConfig, SegNet};
use strataseg_nn::tensor::Normalization;
use strataseg_nn::trainer::{self, Stage, StageConfig, StageOutput};

use crate::render;
use crate::{
    EvalArgs, Failure, PipelineArgs, PredictArgs, Preset, SplitArg, SynthArgs, TrainMetaArgs, TrainSegArgs,
};

type Result<T> = std::result::Result<T, Failure>;

fn split(s: SplitArg) -> Split {
    match s {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    }
}

fn seg_config(p: Preset, size: usize) -> SegModelConfig {
    match p {
        Preset::Tiny => SegModelConfig::tiny(),
        Preset::Full => SegModelConfig::resnet152_like(),
    }
    .with_input_size(size)
}

fn meta_config(p: Preset, size: usize) -> MetaModelConfig {
    match p {
        Preset::Tiny => MetaModelConfig::tiny(),
        Preset::Full => MetaModelConfig::standard(),
    }
    .with_input_size(size)
}

fn create_dir(d: &Path) -> Result<()> {
    fs::create_dir_all(d).map_err(|e| Failure::Runtime(format!("{}: {e}", d.display())))
}

fn stage_output(out: &Path, stage: Stage, quiet: bool) -> Result<StageOutput> {
    create_dir(&out.join("checkpoints"))?;
    create_dir(&out.join("logs"))?;
    let mut o = StageOutput::new(out.join("checkpoints"), stage.as_str());
    o.log = Some(out.join("logs").join(format!("{}.jsonl", stage.as_str())));
    o.verbose = !quiet;
    Ok(o)
}

/// Segmentation model plus the normalization its weights expect.
fn load_seg(path: &Path) -> Result<(SegNet, Normalization)> {
    if !path.exists() {
        return Err(Failure::Runtime(format!("checkpoint {} not found", path.display())));
    }
    let (net, meta) = load_segnet(path, DType::F32)?;
    let norm = meta
        .normalization
        .ok_or_else(|| Failure::Runtime(format!("{} records no input normalization", path.display())))?;
    Ok((net, norm))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut profile = DomainProfile::by_name(&a.profile).map_err(|e| Failure::Usage(e.to_string()))?;
    if a.no_defects {
        profile = profile.without_defects();
    }
    let fractions = if a.train_only {
        SplitFractions::train_only()
    } else {
        SplitFractions::standard()
    };
    let m = generate_dataset(&profile, a.count as usize, fractions, a.seed, CanvasSize::square(a.canvas), &a.out.out)?;
    eprintln!(
        "{} samples: {} train, {} val, {} test",
        a.count,
        m.split_len(Split::Train),
        m.split_len(Split::Val),
        m.split_len(Split::Test)
    );
    println!("{}", a.out.out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn train_seg(a: TrainSegArgs) -> Result<()> {
    let stage: Stage = a.stage.parse().map_err(|e: strataseg_nn::Error| Failure::Usage(e.to_string()))?;
    if !matches!(stage, Stage::Stage2 | Stage::Stage3) {
        return Err(Failure::Usage(format!("train-seg trains stage 2 or 3, not {stage}")));
    }
    let manifest = DatasetManifest::load(&a.manifest)?;
    let mut base = CheckpointMeta::new(ModelKind::Segmentation, json!(null));
    let (net, norm) = match &a.init {
        Some(p) => {
            let (meta, _) = read_checkpoint(p)?;
            match meta.kind {
                ModelKind::Segmentation => {
                    base.provenance = json!({"stage": stage, "init": p});
                    load_seg(p)?
                }
                ModelKind::Backbone => {
                    let net = SegNet::new(seg_config(a.model, a.input_size), a.seed, DType::F32)?;
                    let m = load_backbone_into(p, &net)?;
                    let norm = match m.normalization {
                        Some(n) => n,
                        None => dataset_normalization(&manifest, a.input_size)?,
                    };
                    base.provenance = json!({"stage": stage, "backbone": p});
                    (net, norm)
                }
                ModelKind::Meta => {
                    return Err(Failure::Usage(format!("{} is a meta-model checkpoint", p.display())));
                }
            }
        }
        None => {
            let net = SegNet::new(seg_config(a.model, a.input_size), a.seed, DType::F32)?;
            base.provenance = json!({"stage": stage, "init": "random", "seed": a.seed});
            (net, dataset_normalization(&manifest, a.input_size)?)
        }
    };
    let mut cfg = StageConfig::segmentation(stage);
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    if a.no_augment {
        cfg.augment = None;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = stage_output(&a.out.out, stage, a.quiet)?;
    let r = trainer::train_segmentation(&net, &norm, &manifest, &cfg, &out, base)?;
    if manifest.split_len(Split::Test) > 0 {
        let size = net.config().input_size;
        let test = load_split(&manifest, Split::Test, 4, 0, LoaderOptions::eval(size))?;
        let report = evaluate_segmentation(&net, &norm, &test)?;
        let dir = a.out.out.join("reports");
        create_dir(&dir)?;
        write_json(&dir.join(format!("seg_{stage}.json")), &report)?;
        write_seg_csv(&dir.join(format!("seg_{stage}.csv")), &report)?;
        eprintln!("test mIoU {:.4}", report.miou);
    }
    eprintln!("best epoch {}", r.best_epoch);
    println!("{}", r.checkpoint.display());
    Ok(())
}

pub fn train_meta(a: TrainMetaArgs) -> Result<()> {
    let (seg, norm) = load_seg(&a.seg_checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let size = seg.config().input_size;
    let meta = MetaNet::new(meta_config(a.model, size), a.seed, DType::F32)?;
    let mut cfg = StageConfig::meta();
    cfg.epochs = a.epochs;
    cfg.lr = a.lr;
    cfg.batch_size = a.batch_size;
    cfg.seed = a.seed;
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let out = stage_output(&a.out.out, Stage::Meta, a.quiet)?;
    let mut base = CheckpointMeta::new(ModelKind::Meta, json!(null));
    base.provenance = json!({"segmentation": a.seg_checkpoint});
    let r = trainer::train_meta(&seg, &norm, &meta, &manifest, &cfg, &WfmseParams::default(), &out, base)?;
    match r.best_ap_e {
        Some(v) => eprintln!("best epoch {}, validation AP-E {v:.4}", r.best_epoch),
        None => eprintln!("best epoch {}", r.best_epoch),
    }
    println!("{}", r.checkpoint.display());
    Ok(())
}

pub fn pipeline(a: PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&a.config).map_err(|e| Failure::Usage(e.to_string()))?;
    let stop_after = match &a.stop_after {
        Some(s) => Some(s.parse::<Stage>().map_err(|e| Failure::Usage(e.to_string()))?),
        None => None,
    };
    let opts = PipelineOptions {
        stop_after,
        verbose: !a.quiet,
    };
    match run_pipeline(&cfg, &a.out.out, &opts) {
        Ok(r) => {
            for (label, rep) in &r.segmentation {
                eprintln!("{label}: mIoU {:.4}, OPyC IoU {:.4}", rep.miou, rep.class_iou(strataseg_core::Class::Opyc));
            }
            eprintln!(
                "detection: F1-SS {:.4} (tau {:.2}), AP {:.4}, AP-E {:.4}, MSE {:.4}",
                r.uq.f1_ss, r.uq.tau, r.uq.ap, r.uq.ap_e, r.uq.mse
            );
            println!("{}", r.reports_dir.display());
            Ok(())
        }
        Err(strataseg_nn::Error::Interrupted(stage)) => {
            eprintln!("stopped after {stage}; rerun to resume");
            Ok(())
        }
        Err(e) => Err(e.into()),
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    if let Some(t) = a.tau {
        if !(-1.0..=1.0).contains(&t) {
            return Err(Failure::Usage(format!("--tau {t} outside [-1, 1]")));
        }
    }
    let (seg, norm) = load_seg(&a.seg_checkpoint)?;
    let manifest = DatasetManifest::load(&a.manifest)?;
    let size = seg.config().input_size;
    let target = split(a.split);
    let loader = load_split(&manifest, target, 4, 0, LoaderOptions::eval(size))?;
    if loader.is_empty() {
        return Err(Failure::Runtime(format!("split {} is empty", target.as_str())));
    }
    create_dir(&a.out.out)?;
    let report = evaluate_segmentation(&seg, &norm, &loader)?;
    write_json(&a.out.out.join("seg.json"), &report)?;
    write_seg_csv(&a.out.out.join("seg.csv"), &report)?;
    let label = a
        .seg_checkpoint
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into());
    write_seg_table_csv(&a.out.out.join("seg_table.csv"), &[(label, &report)])?;
    eprintln!("mIoU {:.4}, mP {:.4}", report.miou, report.mp);

    if let Some(p) = &a.meta_checkpoint {
        if !p.exists() {
            return Err(Failure::Runtime(format!("checkpoint {} not found", p.display())));
        }
        let (meta, _) = load_metanet(p, DType::F32)?;
        let params = WfmseParams::default();
        let items = meta_items(&seg, &norm, &loader, &params)?;
        let val_items = if a.tau.is_none() {
            let val = load_split(&manifest, Split::Val, 4, 0, LoaderOptions::eval(size))?;
            meta_items(&seg, &norm, &val, &params)?
        } else {
            Vec::new()
        };
        let (uq, calibration) = evaluate_uq(&meta, &val_items, &items, a.tau)?;
        write_json(&a.out.out.join("uq.json"), &uq)?;
        write_uq_csv(&a.out.out.join("uq.csv"), &uq)?;
        if let Some(c) = &calibration {
            write_json(&a.out.out.join("calibration.json"), c)?;
        }
        eprintln!(
            "F1-SS {:.4} (tau {:.2}), AP {:.4}, AP-E {:.4}, MSE {:.4}",
            uq.f1_ss, uq.tau, uq.ap, uq.ap_e, uq.mse
        );
    }
    println!("{}", a.out.out.display());
    Ok(())
}

struct PredictInput {
    image: PathBuf,
    gt: Option<PathBuf>,
}

fn predict_one(
    input: &PredictInput,
    seg: &SegNet,
    norm: &Normalization,
    meta: Option<&MetaNet>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let size = seg.config().input_size;
    let img = image::open(&input.image).map_err(|e| Failure::Runtime(format!("{}: {e}", input.image.display())))?;
    let gray = resize_gray(&to_gray(&img), size, size);
    let rgb = strataseg_core::dataio::gray_to_rgb(&gray);
    let (probs, pred) = seg.predict(&rgb, norm)?;
    let stem = input
        .image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let path = |kind: &str| out.join(format!("{stem}_{kind}.png"));
    let mut written = Vec::new();
    let save = |p: PathBuf, img: image::RgbImage, written: &mut Vec<PathBuf>| -> Result<()> {
        img.save(&p).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
        written.push(p);
        Ok(())
    };

    save_mask_png(&path("mask"), &pred)?;
    written.push(path("mask"));
    save(path("overlay"), render::palette_overlay(&gray, &pred, render::OVERLAY_ALPHA), &mut written)?;
    if let Some(meta) = meta {
        let soft = meta.predict(&[&probs])?.pop().expect("one map");
        save(path("uncertainty"), render::uncertainty_heatmap(&soft), &mut written)?;
    }
    if let Some(g) = &input.gt {
        let gt: LabelMask = resize_mask(&load_mask(g)?, size, size);
        save(path("error"), render::error_map(&pred, &gt), &mut written)?;
    }
    Ok(written)
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let mut inputs: Vec<PredictInput> = a
        .inputs
        .iter()
        .map(|p| PredictInput {
            image: p.clone(),
            gt: a.gt_dir.as_ref().and_then(|d| {
                let g = d.join(p.file_name()?);
                g.exists().then_some(g)
            }),
        })
        .collect();
    if let Some(m) = &a.manifest {
        let manifest = DatasetManifest::load(m)?;
        inputs.extend(manifest.split(split(a.split)).into_iter().map(|e| PredictInput {
            image: manifest.resolve(&e.image),
            gt: Some(manifest.resolve(&e.mask)),
        }));
    }
    if inputs.is_empty() {
        return Err(Failure::Usage("no input images (pass paths or --manifest)".into()));
    }
    let (seg, norm) = load_seg(&a.seg_checkpoint)?;
    let meta = match &a.meta_checkpoint {
        Some(p) => {
            if !p.exists() {
                return Err(Failure::Runtime(format!("checkpoint {} not found", p.display())));
            }
            Some(load_metanet(p, DType::F32)?.0)
        }
        None => None,
    };
    if let Some(m) = &meta {
        if m.config().input_size != seg.config().input_size {
            return Err(Failure::Runtime("meta and segmentation checkpoints use different input sizes".into()));
        }
    }
    create_dir(&a.out.out)?;
    let mut failed = 0;
    for input in &inputs {
        match predict_one(input, &seg, &norm, meta.as_ref(), &a.out.out) {
            Ok(files) => {
                for f in files {
                    println!("{}", f.display());
                }
            }
            Err(Failure::Usage(e) | Failure::Runtime(e)) => {
                eprintln!("error: {}: {e}", input.image.display());
                failed += 1;
            }
        }
    }
    if failed > 0 {
        return Err(Failure::Runtime(format!("{failed} of {} inputs failed", inputs.len())));
    }
    Ok(())
}
