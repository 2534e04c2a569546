//! Versioned safetensors checkpoints: named tensors plus a JSON metadata header.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::metanet::{MetaModelConfig, MetaNet};
use crate::params::ParamStore;
use crate::segnet::{BackbonePreset, SegModelConfig, SegNet, BACKBONE_PREFIX};
use crate::tensor::Normalization;

pub const FORMAT: &str = "strataseg-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Segmentation,
    Meta,
    /// Encoder weights only.
    Backbone,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Segmentation => "segmentation",
            ModelKind::Meta => "meta",
            ModelKind::Backbone => "backbone",
        }
    }
}

/// Everything stored next to the tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    /// Model config (or backbone preset) as JSON.
    pub config: Value,
    pub normalization: Option<Normalization>,
    /// Where the weights came from.
    pub provenance: Value,
    /// Training hyperparameters of the run that produced the weights.
    pub train: Value,
}

impl CheckpointMeta {
    pub fn new(kind: ModelKind, config: Value) -> Self {
        CheckpointMeta {
            kind,
            config,
            normalization: None,
            provenance: Value::Null,
            train: Value::Null,
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("serializable metadata")
}

/// Writes tensors as f32 together with the metadata header. The file appears atomically.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)], meta: &CheckpointMeta) -> Result<()> {
    let mut info = HashMap::new();
    info.insert("format".to_string(), FORMAT.to_string());
    info.insert("version".to_string(), VERSION.to_string());
    info.insert("kind".to_string(), meta.kind.as_str().to_string());
    info.insert("config".to_string(), to_json(&meta.config));
    if let Some(n) = &meta.normalization {
        info.insert("normalization".to_string(), to_json(n));
    }
    info.insert("provenance".to_string(), to_json(&meta.provenance));
    info.insert("train".to_string(), to_json(&meta.train));
    let data: Vec<(String, Tensor)> = tensors
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.to_dtype(DType::F32)?.contiguous()?)))
        .collect::<Result<_>>()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(data, Some(info), &tmp)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_store(path: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    save_tensors(path, &store.tensors(), meta)
}

fn field<'a>(info: &'a HashMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    info.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::checkpoint(path, format!("metadata field {key:?} missing")))
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, key: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::checkpoint(path, format!("metadata field {key:?}: {e}")))
}

/// Reads metadata and tensors, checking the format tag and version.
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, BTreeMap<String, Tensor>)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&buf)
        .map_err(|e| Error::checkpoint(path, format!("not a safetensors file: {e}")))?;
    let info = header
        .metadata()
        .clone()
        .ok_or_else(|| Error::checkpoint(path, "metadata header missing"))?;
    if field(&info, "format", path)? != FORMAT {
        return Err(Error::checkpoint(path, "unrecognized checkpoint format"));
    }
    let version: u32 = parse(field(&info, "version", path)?, "version", path)?;
    if version != VERSION {
        return Err(Error::checkpoint(path, format!("unsupported checkpoint version {version}")));
    }
    let kind = match field(&info, "kind", path)? {
        "segmentation" => ModelKind::Segmentation,
        "meta" => ModelKind::Meta,
        "backbone" => ModelKind::Backbone,
        other => return Err(Error::checkpoint(path, format!("unknown model kind {other:?}"))),
    };
    let meta = CheckpointMeta {
        kind,
        config: parse(field(&info, "config", path)?, "config", path)?,
        normalization: match info.get("normalization") {
            Some(n) => Some(parse(n, "normalization", path)?),
            None => None,
        },
        provenance: info.get("provenance").map_or(Ok(Value::Null), |v| parse(v, "provenance", path))?,
        train: info.get("train").map_or(Ok(Value::Null), |v| parse(v, "train", path))?,
    };
    let tensors = candle_core::safetensors::load_buffer(&buf, &Device::Cpu)
        .map_err(|e| Error::checkpoint(path, e.to_string()))?
        .into_iter()
        .collect();
    Ok((meta, tensors))
}

fn expect_kind(meta: &CheckpointMeta, kind: ModelKind, path: &Path) -> Result<()> {
    if meta.kind != kind {
        return Err(Error::checkpoint(
            path,
            format!("expected a {} checkpoint, found {}", kind.as_str(), meta.kind.as_str()),
        ));
    }
    Ok(())
}

fn load_into(store: &ParamStore, tensors: &BTreeMap<String, Tensor>, require_all: bool, path: &Path) -> Result<()> {
    store
        .load(tensors, require_all)
        .map_err(|e| Error::checkpoint(path, e.to_string()))
}

pub fn save_segnet(path: &Path, net: &SegNet, mut meta: CheckpointMeta) -> Result<()> {
    meta.kind = ModelKind::Segmentation;
    meta.config = serde_json::to_value(net.config()).expect("serializable config");
    save_store(path, net.store(), &meta)
}

pub fn load_segnet(path: &Path, dtype: DType) -> Result<(SegNet, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path)?;
    expect_kind(&meta, ModelKind::Segmentation, path)?;
    let config: SegModelConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::checkpoint(path, format!("config: {e}")))?;
    let net = SegNet::new(config, 0, dtype)?;
    load_into(net.store(), &tensors, true, path)?;
    Ok((net, meta))
}

pub fn save_metanet(path: &Path, net: &MetaNet, mut meta: CheckpointMeta) -> Result<()> {
    meta.kind = ModelKind::Meta;
    meta.config = serde_json::to_value(net.config()).expect("serializable config");
    save_store(path, net.store(), &meta)
}

pub fn load_metanet(path: &Path, dtype: DType) -> Result<(MetaNet, CheckpointMeta)> {
    let (meta, tensors) = read_checkpoint(path)?;
    expect_kind(&meta, ModelKind::Meta, path)?;
    let config: MetaModelConfig = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::checkpoint(path, format!("config: {e}")))?;
    let net = MetaNet::new(config, 0, dtype)?;
    load_into(net.store(), &tensors, true, path)?;
    Ok((net, meta))
}

/// Encoder tensors of a segmentation model.
pub fn backbone_tensors(net: &SegNet) -> Vec<(String, Tensor)> {
    let prefix = format!("{BACKBONE_PREFIX}.");
    net.store()
        .tensors()
        .into_iter()
        .filter(|(k, _)| k.starts_with(&prefix))
        .collect()
}

pub fn save_backbone(path: &Path, net: &SegNet, mut meta: CheckpointMeta) -> Result<()> {
    meta.kind = ModelKind::Backbone;
    meta.config = serde_json::to_value(net.config().backbone).expect("serializable preset");
    save_tensors(path, &backbone_tensors(net), &meta)
}

/// Copies backbone weights into `net`'s encoder. Every encoder tensor must be
/// present with a matching shape; the first mismatch is reported.
pub fn load_backbone_into(path: &Path, net: &SegNet) -> Result<CheckpointMeta> {
    let (meta, tensors) = read_checkpoint(path)?;
    expect_kind(&meta, ModelKind::Backbone, path)?;
    let preset: BackbonePreset = serde_json::from_value(meta.config.clone())
        .map_err(|e| Error::checkpoint(path, format!("config: {e}")))?;
    if preset != net.config().backbone {
        return Err(Error::checkpoint(
            path,
            format!("backbone preset {preset:?} does not match model preset {:?}", net.config().backbone),
        ));
    }
    let expected: BTreeMap<String, Tensor> = backbone_tensors(net).into_iter().collect();
    for (name, t) in &expected {
        match tensors.get(name) {
            None => return Err(Error::checkpoint(path, format!("missing tensor {name}"))),
            Some(found) if found.dims() != t.dims() => {
                return Err(Error::checkpoint(
                    path,
                    format!("tensor {name}: expected shape {:?}, found {:?}", t.dims(), found.dims()),
                ))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = tensors.keys().find(|k| !expected.contains_key(*k)) {
        return Err(Error::checkpoint(path, format!("unexpected tensor {extra}")));
    }
    load_into(net.store(), &tensors, false, path)?;
    Ok(meta)
}
