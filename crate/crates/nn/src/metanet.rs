//! U-Net meta-model mapping softmax probabilities to per-pixel soft labels.

use candle_core::{DType, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use strataseg_core::{ProbabilityMap, SoftLabelMap, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::layers::{max_pool_2x2, Conv2d, ConvBnRelu, Ctx, DecoderBlock};
use crate::params::{ParamPath, ParamStore};
use crate::tensor::{probs_to_tensor, tensor_to_fields};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetaModelConfig {
    pub encoder: Vec<usize>,
    pub decoder: Vec<usize>,
    pub in_channels: usize,
    pub input_size: usize,
}

impl MetaModelConfig {
    pub fn standard() -> Self {
        MetaModelConfig {
            encoder: vec![64, 128, 256, 512, 1024],
            decoder: vec![256, 128, 64, 32],
            in_channels: NUM_CLASSES,
            input_size: 512,
        }
    }

    pub fn tiny() -> Self {
        MetaModelConfig {
            encoder: vec![8, 16, 32, 64, 128],
            decoder: vec![32, 16, 8, 8],
            in_channels: NUM_CLASSES,
            input_size: 64,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder.len() != 5 || self.decoder.len() != 4 {
            return Err(Error::Config(format!(
                "meta model needs 5 encoder and 4 decoder blocks, got {} and {}",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.encoder.contains(&0) || self.decoder.contains(&0) || self.in_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 16",
                self.input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DoubleConv {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl DoubleConv {
    fn new(p: &ParamPath, in_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(DoubleConv {
            a: ConvBnRelu::new(&p.pp("c1"), in_ch, out_ch, 3, 1, false)?,
            b: ConvBnRelu::new(&p.pp("c2"), out_ch, out_ch, 3, 1, false)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x, ctx)?, ctx)
    }
}

#[derive(Debug, Clone)]
pub struct MetaNet {
    config: MetaModelConfig,
    store: ParamStore,
    encoder: Vec<DoubleConv>,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl MetaNet {
    pub fn new(config: MetaModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let mut in_ch = config.in_channels;
        let mut encoder = Vec::new();
        for (i, &out) in config.encoder.iter().enumerate() {
            encoder.push(DoubleConv::new(&root.pp("encoder").pp(i + 1), in_ch, out)?);
            in_ch = out;
        }
        let mut decoder = Vec::new();
        for (i, &out) in config.decoder.iter().enumerate() {
            let skip = config.encoder[3 - i];
            decoder.push(DecoderBlock::new(&root.pp("decoder").pp(i + 1), in_ch, skip, out)?);
            in_ch = out;
        }
        let head = Conv2d::new(&root.pp("head"), in_ch, 1, 1, 1, 0, true)?;
        Ok(MetaNet {
            config,
            store,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &MetaModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Outputs of the five encoder blocks, shallowest first.
    pub fn encode(&self, x: &Tensor, ctx: Ctx) -> Result<Vec<Tensor>> {
        let mut feats = Vec::with_capacity(5);
        let mut h = x.clone();
        for (i, blk) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = max_pool_2x2(&h)?;
            }
            h = blk.forward(&h, ctx)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// B×C×H×W probabilities to B×H×W soft labels in (-1, 1).
    pub fn forward(&self, probs: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = probs.dims4()?;
        let s = self.config.input_size;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "input has {c} channels, meta model expects {}",
                self.config.in_channels
            )));
        }
        if h != s || w != s {
            return Err(Error::Shape(format!("input is {h}x{w}, meta model expects {s}x{s}")));
        }
        if b == 0 {
            return Ok(Tensor::zeros((0, h, w), probs.dtype(), probs.device())?);
        }
        let feats = self.encode(probs, ctx)?;
        let mut d = feats[4].clone();
        for (i, blk) in self.decoder.iter().enumerate() {
            d = blk.forward(&d, Some(&feats[3 - i]), ctx)?;
        }
        Ok(self.head.forward(&d, ctx)?.tanh()?.squeeze(1)?)
    }

    /// Evaluation-mode soft labels, one map per probability map.
    pub fn predict(&self, probs: &[&ProbabilityMap]) -> Result<Vec<SoftLabelMap>> {
        let x = probs_to_tensor(probs, self.dtype())?;
        let out = self.forward(&x, Ctx::EVAL)?;
        tensor_to_fields(&out)?
            .into_iter()
            .map(|a| Ok(SoftLabelMap::new(a)?))
            .collect()
    }
}

/// Uncertainty as the negated soft label: high where the model is likely wrong.
pub fn uncertainty_map(soft: &SoftLabelMap) -> Array2<f32> {
    soft.as_array().mapv(|v| -v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::array;

    #[test]
    fn tiny_forward_shape_and_range() {
        let net = MetaNet::new(MetaModelConfig::tiny(), 0, DType::F32).unwrap();
        let x = Tensor::rand(0f32, 1f32, (2, 6, 64, 64), &Device::Cpu).unwrap();
        let feats = net.encode(&x, Ctx::EVAL).unwrap();
        assert_eq!(feats[4].dims4().unwrap(), (2, 128, 4, 4));
        let y = net.forward(&x, Ctx::TRAIN).unwrap();
        assert_eq!(y.dims3().unwrap(), (2, 64, 64));
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| *x > -1.0 && *x < 1.0));
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let net = MetaNet::new(MetaModelConfig::tiny(), 0, DType::F32).unwrap();
        let x = Tensor::zeros((1, 5, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(net.forward(&x, Ctx::EVAL), Err(Error::Shape(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = MetaNet::new(MetaModelConfig::tiny(), 2, DType::F32).unwrap();
        let b = MetaNet::new(MetaModelConfig::tiny(), 2, DType::F32).unwrap();
        assert_eq!(a.store().checksum().unwrap(), b.store().checksum().unwrap());
    }

    #[test]
    fn config_validation() {
        assert!(MetaModelConfig::tiny().with_input_size(40).validate().is_err());
        let mut c = MetaModelConfig::tiny();
        c.decoder.push(4);
        assert!(c.validate().is_err());
    }

    #[test]
    fn uncertainty_is_negated_soft_label() {
        let s = SoftLabelMap::new(array![[0.9f32, -0.8, 0.0]]).unwrap();
        let u = uncertainty_map(&s);
        assert_eq!(u, array![[-0.9f32, 0.8, 0.0]]);
        let back = SoftLabelMap::new(u).unwrap();
        assert_eq!(uncertainty_map(&back), *s.as_array());
    }
}
