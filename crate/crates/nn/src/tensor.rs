//! Conversions between ndarray samples and candle tensors.

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use strataseg_core::{LabelMask, ProbabilityMap, SoftLabelMap};

use crate::error::{Error, Result};

/// Per-channel standardization applied when images become model inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Normalization {
    /// Canonical constants of ImageNet-pretrained backbones.
    pub fn imagenet() -> Self {
        Normalization {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }

    pub fn identity() -> Self {
        Normalization {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    /// Channel mean and standard deviation over every pixel of `images`.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Array3<f32>>) -> Result<Self> {
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        let mut n = 0f64;
        for img in images {
            for px in img.rows() {
                for c in 0..3 {
                    let v = px[c] as f64;
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1.0;
            }
        }
        if n == 0.0 {
            return Err(Error::Config("cannot compute normalization from no pixels".into()));
        }
        let mut out = Normalization::identity();
        for c in 0..3 {
            let mean = sum[c] / n;
            let var = (sq[c] / n - mean * mean).max(0.0);
            out.mean[c] = mean as f32;
            out.std[c] = (var.sqrt() as f32).max(1e-6);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|s| !(*s > 0.0) || !s.is_finite()) || self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::Config(format!("invalid normalization {self:?}")));
        }
        Ok(())
    }
}

/// H×W×3 images in [0, 1] to a standardized B×3×H×W tensor.
pub fn images_to_tensor(images: &[&Array3<f32>], norm: &Normalization, dtype: DType) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (h, w, c) = first.dim();
    if c != 3 {
        return Err(Error::Shape(format!("image has {c} channels, expected 3")));
    }
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dim() != (h, w, 3) {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", (h, w, 3), img.dim())));
        }
        for ch in 0..3 {
            let (m, s) = (norm.mean[ch], norm.std[ch]);
            data.extend(img.index_axis(ndarray::Axis(2), ch).iter().map(|v| (v - m) / s));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Label masks to a B×C×H×W one-hot tensor.
pub fn masks_to_onehot(masks: &[&LabelMask], num_classes: usize, dtype: DType) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (h, w) = first.dim();
    let mut data = vec![0f32; masks.len() * num_classes * h * w];
    for (b, m) in masks.iter().enumerate() {
        if m.dim() != (h, w) {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", (h, w), m.dim())));
        }
        m.validate(num_classes)?;
        for ((r, c), &v) in m.as_array().indexed_iter() {
            data[((b * num_classes + v as usize) * h + r) * w + c] = 1.0;
        }
    }
    Ok(Tensor::from_vec(data, (masks.len(), num_classes, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Probability maps (H×W×C) to a B×C×H×W tensor.
pub fn probs_to_tensor(maps: &[&ProbabilityMap], dtype: DType) -> Result<Tensor> {
    let Some(first) = maps.first() else {
        return Err(Error::Shape("empty probability batch".into()));
    };
    let (h, w, c) = first.dim();
    let mut data = Vec::with_capacity(maps.len() * c * h * w);
    for m in maps {
        if m.dim() != (h, w, c) {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", (h, w, c), m.dim())));
        }
        data.extend(m.as_array().view().permuted_axes([2, 0, 1]).iter().copied());
    }
    Ok(Tensor::from_vec(data, (maps.len(), c, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// H×W fields to a B×H×W tensor.
pub fn fields_to_tensor(fields: &[&Array2<f32>], dtype: DType) -> Result<Tensor> {
    let Some(first) = fields.first() else {
        return Err(Error::Shape("empty batch".into()));
    };
    let (h, w) = first.dim();
    let mut data = Vec::with_capacity(fields.len() * h * w);
    for f in fields {
        if f.dim() != (h, w) {
            return Err(Error::Shape(format!("batch mixes sizes {:?} and {:?}", (h, w), f.dim())));
        }
        data.extend(f.iter().copied());
    }
    Ok(Tensor::from_vec(data, (fields.len(), h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn soft_to_tensor(maps: &[&SoftLabelMap], dtype: DType) -> Result<Tensor> {
    let arrays: Vec<&Array2<f32>> = maps.iter().map(|m| m.as_array()).collect();
    fields_to_tensor(&arrays, dtype)
}

/// B×H×W tensor to per-image fields.
pub fn tensor_to_fields(t: &Tensor) -> Result<Vec<Array2<f32>>> {
    let (b, h, w) = t.dims3()?;
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok((0..b)
        .map(|i| Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec()).expect("slice length"))
        .collect())
}
