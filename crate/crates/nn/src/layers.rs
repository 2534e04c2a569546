//! Convolution, transposed convolution, batch norm and pooling on candle tensors.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};
use crate::im2col;
use crate::params::{Init, ParamPath};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Forward-pass mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ctx {
    /// Batch statistics (and running-stat updates) in batch norm.
    pub train: bool,
    /// Record operations for backpropagation.
    pub grad: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx {
        train: true,
        grad: true,
    };
    pub const EVAL: Ctx = Ctx {
        train: false,
        grad: false,
    };
    /// Frozen statistics with gradient tracking.
    pub const EVAL_GRAD: Ctx = Ctx {
        train: false,
        grad: true,
    };

    fn value(&self, v: &Var) -> Tensor {
        if self.grad {
            v.as_tensor().clone()
        } else {
            v.as_tensor().detach()
        }
    }
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// Square kernel, He-normal weights, zero bias.
    pub fn new(
        p: &ParamPath,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let weight = p.param("weight", &[out_ch, in_ch, kernel, kernel], Init::Kaiming { fan_in }, true)?;
        let bias = if bias {
            Some(p.param("bias", &[out_ch], Init::Const(0.0), true)?)
        } else {
            None
        };
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = im2col::conv2d(x, &ctx.value(&self.weight), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => add_channel_bias(&y, &ctx.value(b)),
            None => Ok(y),
        }
    }
}

/// Transposed convolution; weight layout (in, out, k, k).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Var,
    bias: Option<Var>,
    stride: usize,
    padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        p: &ParamPath,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Result<Self> {
        // Each output pixel sees about (kernel / stride)^2 taps per input channel.
        let taps = (kernel / stride.max(1)).max(1);
        let fan_in = in_ch * taps * taps;
        let weight = p.param("weight", &[in_ch, out_ch, kernel, kernel], Init::Kaiming { fan_in }, true)?;
        let bias = if bias {
            Some(p.param("bias", &[out_ch], Init::Const(0.0), true)?)
        } else {
            None
        };
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = im2col::conv_transpose2d(x, &ctx.value(&self.weight), self.stride, self.padding)?;
        match &self.bias {
            Some(b) => add_channel_bias(&y, &ctx.value(b)),
            None => Ok(y),
        }
    }
}

/// Sum over batch and spatial dims as a 1×C×1×1 tensor. Reduces the contiguous
/// spatial axis first, which is much faster than a strided multi-axis reduction.
fn channel_sum(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h * w))?.sum_keepdim(2)?.sum_keepdim(0)?.reshape((1, c, 1, 1))?)
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Var,
    bias: Var,
    running_mean: Var,
    running_var: Var,
}

impl BatchNorm2d {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(BatchNorm2d {
            weight: p.param("weight", &[channels], Init::Const(1.0), true)?,
            bias: p.param("bias", &[channels], Init::Const(0.0), true)?,
            running_mean: p.param("running_mean", &[channels], Init::Const(0.0), false)?,
            running_var: p.param("running_var", &[channels], Init::Const(1.0), false)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        let (xc, var) = if ctx.train {
            let n = (b * h * w) as f64;
            if n < 1.0 {
                return Ok(x.clone());
            }
            let mean = (channel_sum(x)? / n)?;
            let xc = x.broadcast_sub(&mean)?;
            let var = (channel_sum(&xc.sqr()?)? / n)?;
            let unbiased = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let m = BN_MOMENTUM;
            let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor() * (1.0 - m))?
                + (var.detach().flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm.detach())?;
            self.running_var.set(&rv.detach())?;
            (xc, var)
        } else {
            let mean = self.running_mean.as_tensor().detach().reshape(shape)?;
            let var = self.running_var.as_tensor().detach().reshape(shape)?;
            (x.broadcast_sub(&mean)?, var)
        };
        let scale = (var + BN_EPS)?
            .sqrt()?
            .recip()?
            .broadcast_mul(&ctx.value(&self.weight).reshape(shape)?)?;
        Ok(xc.broadcast_mul(&scale)?.broadcast_add(&ctx.value(&self.bias).reshape(shape)?)?)
    }
}

/// Convolution → batch norm → ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(p: &ParamPath, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv2d::new(&p.pp("conv"), in_ch, out_ch, kernel, stride, kernel / 2, bias)?,
            bn: BatchNorm2d::new(&p.pp("bn"), out_ch)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?.relu()?)
    }
}

/// Every other element along dims 2 and 3, starting at 0.
fn subsample2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let x = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    Ok(x.narrow(3, 0, 1)?.narrow(5, 0, 1)?.reshape((b, c, h / 2, w / 2))?)
}

/// 3×3 max pool, stride 2, padding 1, for non-negative inputs (zero padding is
/// then equivalent to -inf padding). Built from shifted views so it is
/// differentiable.
pub fn max_pool_3x3_s2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even spatial size, got {h}x{w}")));
    }
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let mut out: Option<Tensor> = None;
    for dy in 0..3 {
        for dx in 0..3 {
            let view = subsample2(&padded.narrow(2, dy, h)?.narrow(3, dx, w)?)?;
            out = Some(match out {
                None => view,
                Some(o) => o.maximum(&view)?,
            });
        }
    }
    Ok(out.expect("nine views"))
}

/// 2×2 max pool with stride 2. The built-in pooling op scales its gradient by
/// the tie fraction of each window, so this takes the maximum of four strided views.
pub fn max_pool_2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("max pool needs even spatial size, got {h}x{w}")));
    }
    let x = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    let view = |dy: usize, dx: usize| -> Result<Tensor> {
        Ok(x.narrow(3, dy, 1)?.narrow(5, dx, 1)?.reshape((b, c, h / 2, w / 2))?)
    };
    let top = view(0, 0)?.maximum(&view(0, 1)?)?;
    let bottom = view(1, 0)?.maximum(&view(1, 1)?)?;
    Ok(top.maximum(&bottom)?)
}

/// Transposed-conv upsampling → BN → ReLU, concatenation with an optional skip
/// (decoder features first), then 3×3 conv → BN → ReLU.
#[derive(Debug, Clone)]
pub struct DecoderBlock {
    up: ConvTranspose2d,
    up_bn: BatchNorm2d,
    fuse: ConvBnRelu,
    skip_channels: usize,
}

impl DecoderBlock {
    pub fn new(p: &ParamPath, in_ch: usize, skip_ch: usize, out_ch: usize) -> Result<Self> {
        Ok(DecoderBlock {
            up: ConvTranspose2d::new(&p.pp("up"), in_ch, out_ch, 4, 2, 1, true)?,
            up_bn: BatchNorm2d::new(&p.pp("up_bn"), out_ch)?,
            fuse: ConvBnRelu::new(&p.pp("fuse"), out_ch + skip_ch, out_ch, 3, 1, true)?,
            skip_channels: skip_ch,
        })
    }

    pub fn forward(&self, prev: &Tensor, skip: Option<&Tensor>, ctx: Ctx) -> Result<Tensor> {
        let (_, _, h, w) = prev.dims4()?;
        let up = self.up_bn.forward(&self.up.forward(prev, ctx)?, ctx)?.relu()?;
        let x = match skip {
            Some(s) => {
                let (_, sc, sh, sw) = s.dims4()?;
                if (sh, sw) != (2 * h, 2 * w) {
                    return Err(Error::Shape(format!(
                        "skip is {sh}x{sw} but upsampled features are {}x{}",
                        2 * h,
                        2 * w
                    )));
                }
                if sc != self.skip_channels {
                    return Err(Error::Shape(format!(
                        "skip has {sc} channels, block expects {}",
                        self.skip_channels
                    )));
                }
                Tensor::cat(&[&up, s], 1)?
            }
            None if self.skip_channels > 0 => {
                return Err(Error::Shape("decoder block expects a skip input".into()))
            }
            None => up,
        };
        self.fuse.forward(&x, ctx)
    }
}

/// Softmax over the channel axis.
pub fn softmax_channels(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Mean over all elements, as a scalar tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.elem_count().max(1) as f64;
    Ok((x.sum_all()? / n)?)
}
