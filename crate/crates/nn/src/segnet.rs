//! Residual encoder with a five-block transposed-convolution decoder.

use candle_core::{DType, Tensor};
use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};
use strataseg_core::{argmax_labels, LabelMask, ProbabilityMap, NUM_CLASSES};

use crate::error::{Error, Result};
use crate::layers::{max_pool_3x3_s2, softmax_channels, BatchNorm2d, Conv2d, ConvBnRelu, Ctx, DecoderBlock};
use crate::params::{ParamPath, ParamStore};
use crate::tensor::{images_to_tensor, Normalization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackbonePreset {
    /// Bottleneck blocks [3, 8, 36, 3], 64-channel stem, stage outputs 256/512/1024/2048.
    Resnet152Like,
    /// Basic blocks [1, 1, 1, 1], 8-channel stem, stage outputs 8/16/32/64.
    Tiny,
}

/// Shape of a residual encoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackboneLayout {
    pub stem: usize,
    pub blocks: [usize; 4],
    /// Inner width of each stage.
    pub widths: [usize; 4],
    /// Output channels per block relative to the inner width.
    pub expansion: usize,
}

impl BackbonePreset {
    pub fn layout(self) -> BackboneLayout {
        match self {
            BackbonePreset::Resnet152Like => BackboneLayout {
                stem: 64,
                blocks: [3, 8, 36, 3],
                widths: [64, 128, 256, 512],
                expansion: 4,
            },
            BackbonePreset::Tiny => BackboneLayout {
                stem: 8,
                blocks: [1, 1, 1, 1],
                widths: [8, 16, 32, 64],
                expansion: 1,
            },
        }
    }
}

impl BackboneLayout {
    /// Channels of the stem skip and the first three stage outputs.
    pub fn skip_channels(&self) -> [usize; 4] {
        [
            self.stem,
            self.widths[0] * self.expansion,
            self.widths[1] * self.expansion,
            self.widths[2] * self.expansion,
        ]
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.widths[3] * self.expansion
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub backbone: BackbonePreset,
    pub decoder: Vec<usize>,
    pub num_classes: usize,
    pub input_size: usize,
}

impl SegModelConfig {
    pub fn resnet152_like() -> Self {
        SegModelConfig {
            backbone: BackbonePreset::Resnet152Like,
            decoder: vec![256, 128, 64, 32, 16],
            num_classes: NUM_CLASSES,
            input_size: 512,
        }
    }

    pub fn tiny() -> Self {
        SegModelConfig {
            backbone: BackbonePreset::Tiny,
            decoder: vec![64, 32, 16, 8, 8],
            num_classes: NUM_CLASSES,
            input_size: 64,
        }
    }

    pub fn with_input_size(mut self, size: usize) -> Self {
        self.input_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.decoder.len() != 5 {
            return Err(Error::Config(format!(
                "decoder needs exactly 5 blocks, got {}",
                self.decoder.len()
            )));
        }
        if self.decoder.contains(&0) {
            return Err(Error::Config("decoder channels must be positive".into()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum ResBlock {
    Basic {
        c1: ConvBnRelu,
        conv2: Conv2d,
        bn2: BatchNorm2d,
        down: Option<(Conv2d, BatchNorm2d)>,
    },
    Bottleneck {
        c1: ConvBnRelu,
        c2: ConvBnRelu,
        conv3: Conv2d,
        bn3: BatchNorm2d,
        down: Option<(Conv2d, BatchNorm2d)>,
    },
}

impl ResBlock {
    fn new(p: &ParamPath, in_ch: usize, width: usize, expansion: usize, stride: usize) -> Result<Self> {
        let out = width * expansion;
        let down = if stride != 1 || in_ch != out {
            Some((
                Conv2d::new(&p.pp("down").pp("conv"), in_ch, out, 1, stride, 0, false)?,
                BatchNorm2d::new(&p.pp("down").pp("bn"), out)?,
            ))
        } else {
            None
        };
        if expansion == 1 {
            Ok(ResBlock::Basic {
                c1: ConvBnRelu::new(&p.pp("c1"), in_ch, width, 3, stride, false)?,
                conv2: Conv2d::new(&p.pp("c2").pp("conv"), width, width, 3, 1, 1, false)?,
                bn2: BatchNorm2d::new(&p.pp("c2").pp("bn"), width)?,
                down,
            })
        } else {
            Ok(ResBlock::Bottleneck {
                c1: ConvBnRelu::new(&p.pp("c1"), in_ch, width, 1, 1, false)?,
                c2: ConvBnRelu::new(&p.pp("c2"), width, width, 3, stride, false)?,
                conv3: Conv2d::new(&p.pp("c3").pp("conv"), width, out, 1, 1, 0, false)?,
                bn3: BatchNorm2d::new(&p.pp("c3").pp("bn"), out)?,
                down,
            })
        }
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (y, down) = match self {
            ResBlock::Basic { c1, conv2, bn2, down } => {
                let y = c1.forward(x, ctx)?;
                (bn2.forward(&conv2.forward(&y, ctx)?, ctx)?, down)
            }
            ResBlock::Bottleneck { c1, c2, conv3, bn3, down } => {
                let y = c2.forward(&c1.forward(x, ctx)?, ctx)?;
                (bn3.forward(&conv3.forward(&y, ctx)?, ctx)?, down)
            }
        };
        let shortcut = match down {
            Some((conv, bn)) => bn.forward(&conv.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + shortcut)?.relu()?)
    }
}

/// Residual encoder exposing the stem and first three stage outputs as skips.
#[derive(Debug, Clone)]
pub struct Backbone {
    layout: BackboneLayout,
    stem: ConvBnRelu,
    stages: Vec<Vec<ResBlock>>,
}

/// Encoder outputs: four skips (1/2, 1/4, 1/8, 1/16) and the 1/32 bottleneck.
pub struct Features {
    pub skips: [Tensor; 4],
    pub bottleneck: Tensor,
}

impl Backbone {
    pub fn new(p: &ParamPath, preset: BackbonePreset) -> Result<Self> {
        let layout = preset.layout();
        let stem = ConvBnRelu::new(&p.pp("stem"), 3, layout.stem, 7, 2, false)?;
        let mut in_ch = layout.stem;
        let mut stages = Vec::new();
        for s in 0..4 {
            let stride = if s == 0 { 1 } else { 2 };
            let mut blocks = Vec::new();
            for b in 0..layout.blocks[s] {
                let p = p.pp(format!("layer{}", s + 1)).pp(b);
                let blk = ResBlock::new(&p, in_ch, layout.widths[s], layout.expansion, if b == 0 { stride } else { 1 })?;
                in_ch = layout.widths[s] * layout.expansion;
                blocks.push(blk);
            }
            stages.push(blocks);
        }
        Ok(Backbone { layout, stem, stages })
    }

    pub fn layout(&self) -> &BackboneLayout {
        &self.layout
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Features> {
        let s0 = self.stem.forward(x, ctx)?;
        let mut h = max_pool_3x3_s2(&s0)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for blk in stage {
                h = blk.forward(&h, ctx)?;
            }
            outs.push(h.clone());
        }
        let bottleneck = outs.pop().expect("four stages");
        let [s1, s2, s3]: [Tensor; 3] = outs.try_into().expect("three skips");
        Ok(Features {
            skips: [s0, s1, s2, s3],
            bottleneck,
        })
    }
}

/// Parameter-name prefix of the encoder inside a segmentation model.
pub const BACKBONE_PREFIX: &str = "encoder";

/// Segmentation model: parameters, config and modules.
#[derive(Debug, Clone)]
pub struct SegNet {
    config: SegModelConfig,
    store: ParamStore,
    backbone: Backbone,
    decoder: Vec<DecoderBlock>,
    head: Conv2d,
}

impl SegNet {
    /// Builds a randomly initialized model; values depend only on `seed`.
    pub fn new(config: SegModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(seed, dtype);
        let root = store.root();
        let backbone = Backbone::new(&root.pp(BACKBONE_PREFIX), config.backbone)?;
        let layout = backbone.layout().clone();
        let skips = layout.skip_channels();
        let mut in_ch = layout.bottleneck_channels();
        let mut decoder = Vec::new();
        for (i, &out) in config.decoder.iter().enumerate() {
            // D1..D4 consume skips from deepest to shallowest; D5 has none.
            let skip = if i < 4 { skips[3 - i] } else { 0 };
            decoder.push(DecoderBlock::new(&root.pp("decoder").pp(i + 1), in_ch, skip, out)?);
            in_ch = out;
        }
        let head = Conv2d::new(&root.pp("head"), in_ch, config.num_classes, 1, 1, 0, true)?;
        Ok(SegNet {
            config,
            store,
            backbone,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &SegModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn decoder_len(&self) -> usize {
        self.decoder.len()
    }

    /// Encoder features for inspection.
    pub fn encode(&self, x: &Tensor, ctx: Ctx) -> Result<Features> {
        self.backbone.forward(x, ctx)
    }

    /// B×3×H×W images to B×C×H×W logits.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let s = self.config.input_size;
        if c != 3 || h != s || w != s {
            return Err(Error::Shape(format!(
                "input is {c}x{h}x{w}, model expects 3x{s}x{s}"
            )));
        }
        if b == 0 {
            return Ok(Tensor::zeros((0, self.config.num_classes, h, w), x.dtype(), x.device())?);
        }
        let feats = self.backbone.forward(x, ctx)?;
        let mut d = feats.bottleneck;
        for (i, blk) in self.decoder.iter().enumerate() {
            let skip = if i < 4 { Some(&feats.skips[3 - i]) } else { None };
            d = blk.forward(&d, skip, ctx)?;
        }
        self.head.forward(&d, ctx)
    }

    /// Softmax probabilities in evaluation mode, one map per image (H×W×C).
    pub fn predict_probs(&self, images: &[&Array3<f32>], norm: &Normalization) -> Result<Vec<ProbabilityMap>> {
        let x = images_to_tensor(images, norm, self.dtype())?;
        let probs = softmax_channels(&self.forward(&x, Ctx::EVAL)?)?;
        probs_to_maps(&probs)
    }

    /// Probability map and argmax labels for one preprocessed image.
    pub fn predict(&self, image: &Array3<f32>, norm: &Normalization) -> Result<(ProbabilityMap, LabelMask)> {
        let probs = self.predict_probs(&[image], norm)?.pop().expect("one image");
        let labels = argmax_labels(&probs);
        Ok((probs, labels))
    }
}

/// B×C×H×W probabilities to per-image H×W×C maps.
pub fn probs_to_maps(probs: &Tensor) -> Result<Vec<ProbabilityMap>> {
    let (b, c, h, w) = probs.dims4()?;
    let flat = probs.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let arr = ndarray::Array4::from_shape_vec((b, c, h, w), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(arr
        .axis_iter(Axis(0))
        .map(|chw| ProbabilityMap::new_unchecked(chw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned()))
        .collect())
}
