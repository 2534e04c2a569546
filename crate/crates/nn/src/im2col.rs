//! Convolutions as patch extraction plus one matrix product.
//!
//! `Im2Col` turns a B×C×H×W batch into a (C·k·k)×(B·L) patch matrix (L output
//! positions per image); `Col2Im` scatters such columns back, summing overlaps. Each is the
//! other's adjoint, which gives both ops their backward pass. A convolution is
//! then `W · im2col(x)` and a transposed convolution is `col2im(Wᵀ · x)`.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// Patch geometry over an image of size `img_h`×`img_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    kernel: usize,
    stride: usize,
    pad: usize,
    img_h: usize,
    img_w: usize,
}

impl Geometry {
    fn grid(&self) -> (usize, usize) {
        let gh = (self.img_h + 2 * self.pad - self.kernel) / self.stride + 1;
        let gw = (self.img_w + 2 * self.pad - self.kernel) / self.stride + 1;
        (gh, gw)
    }

    /// Calls `f(tap, grid_start, image_start, len)` for each run of in-bounds
    /// taps of one channel: grid indices `grid_start + j` read image index
    /// `image_start + j * stride` for `j < len`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (gh, gw) = self.grid();
        let (k, s, p) = (self.kernel, self.stride, self.pad);
        for ky in 0..k {
            for kx in 0..k {
                // Grid columns whose tap column lies inside the image.
                let gx0 = p.saturating_sub(kx).div_ceil(s);
                let gx1 = if self.img_w + p > kx { ((self.img_w + p - kx - 1) / s + 1).min(gw) } else { 0 };
                if gx0 >= gx1 {
                    continue;
                }
                for gy in 0..gh {
                    let iy = gy * s + ky;
                    if iy < p || iy - p >= self.img_h {
                        continue;
                    }
                    let ix0 = gx0 * s + kx - p;
                    f(ky * k + kx, gy * gw + gx0, (iy - p) * self.img_w + ix0, gx1 - gx0);
                }
            }
        }
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => Err(candle_core::Error::Msg(format!("{op} needs a contiguous input"))),
    }
}

struct Im2Col(Geometry);

impl Im2Col {
    fn run<T: WithDType>(&self, src: &[T], b: usize, c: usize) -> Vec<T> {
        let g = self.0;
        let (gh, gw) = g.grid();
        let l = gh * gw;
        let kk = g.kernel * g.kernel;
        let plane = g.img_h * g.img_w;
        let width = b * l;
        let mut dst = vec![T::zero(); c * kk * width];
        for bc in 0..b * c {
            let (bi, ci) = (bc / c, bc % c);
            let img = &src[bc * plane..(bc + 1) * plane];
            g.for_each_run(|tap, g0, i0, n| {
                let at = (ci * kk + tap) * width + bi * l + g0;
                let row = &mut dst[at..at + n];
                if g.stride == 1 {
                    row.copy_from_slice(&img[i0..i0 + n]);
                } else {
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = img[i0 + j * g.stride];
                    }
                }
            });
        }
        dst
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        if (h, w) != (self.0.img_h, self.0.img_w) {
            return Err(candle_core::Error::Msg(format!("im2col built for {}x{}, got {h}x{w}", self.0.img_h, self.0.img_w)));
        }
        let (gh, gw) = self.0.grid();
        let shape = Shape::from((c * self.0.kernel * self.0.kernel, b * gh * gw));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, "im2col")?, b, c)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, "im2col")?, b, c)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "im2col"));
            }
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl Col2Im {
    fn run<T: WithDType>(&self, src: &[T], b: usize, c: usize) -> Vec<T> {
        let g = self.0;
        let (gh, gw) = g.grid();
        let l = gh * gw;
        let kk = g.kernel * g.kernel;
        let plane = g.img_h * g.img_w;
        let width = b * l;
        let mut dst = vec![T::zero(); b * c * plane];
        for bc in 0..b * c {
            let (bi, ci) = (bc / c, bc % c);
            let img = &mut dst[bc * plane..(bc + 1) * plane];
            g.for_each_run(|tap, g0, i0, n| {
                let at = (ci * kk + tap) * width + bi * l + g0;
                let row = &src[at..at + n];
                for (j, v) in row.iter().enumerate() {
                    img[i0 + j * g.stride] += *v;
                }
            });
        }
        dst
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (rows, width) = layout.shape().dims2()?;
        let kk = self.0.kernel * self.0.kernel;
        let (gh, gw) = self.0.grid();
        if width % (gh * gw) != 0 || rows % kk != 0 {
            return Err(candle_core::Error::Msg(format!("col2im got {rows}x{width} columns for a {gh}x{gw} grid")));
        }
        let (b, c) = (width / (gh * gw), rows / kk);
        let shape = Shape::from((b, c, self.0.img_h, self.0.img_w));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(self.run(contiguous(v, layout, "col2im")?, b, c)),
            CpuStorage::F64(v) => CpuStorage::F64(self.run(contiguous(v, layout, "col2im")?, b, c)),
            other => {
                return Err(candle_core::Error::UnsupportedDTypeForOp(other.dtype(), "col2im"));
            }
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution; `weight` is (out, in, k, k).
pub fn conv2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (co, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::Shape(format!("conv input has {c} channels, weight is {:?}", weight.dims())));
    }
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 {
        return Err(Error::Shape(format!("{h}x{w} input too small for kernel {k} with padding {pad}")));
    }
    let g = Geometry {
        kernel: k,
        stride,
        pad,
        img_h: h,
        img_w: w,
    };
    let (gh, gw) = g.grid();
    let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
    let wm = weight.reshape((co, c * k * k))?;
    // (co, B·L) -> (B, co, L); the copy moves whole rows of L values.
    let y = wm.matmul(&cols)?.reshape((co, b, gh * gw))?.transpose(0, 1)?.contiguous()?;
    Ok(y.reshape((b, co, gh, gw))?)
}

/// Transposed 2-D convolution (the adjoint of `conv2d`); `weight` is (in, out, k, k).
/// Output size is (h − 1)·stride − 2·pad + k.
pub fn conv_transpose2d(x: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ci, co, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(Error::Shape(format!("transposed conv input has {c} channels, weight is {:?}", weight.dims())));
    }
    let out_h = ((h - 1) * stride + k).checked_sub(2 * pad);
    let out_w = ((w - 1) * stride + k).checked_sub(2 * pad);
    let (Some(out_h), Some(out_w)) = (out_h, out_w) else {
        return Err(Error::Shape(format!("padding {pad} too large for a {h}x{w} input")));
    };
    let g = Geometry {
        kernel: k,
        stride,
        pad,
        img_h: out_h,
        img_w: out_w,
    };
    if g.grid() != (h, w) {
        return Err(Error::Shape(format!("transposed conv geometry does not invert for {h}x{w}")));
    }
    let wt = weight.reshape((c, co * k * k))?.t()?.contiguous()?;
    let xs = x.reshape((b, c, h * w))?.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?;
    let cols = wt.matmul(&xs)?;
    Ok(cols.apply_op1(Col2Im(g))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand(shape: &[usize]) -> Tensor {
        Tensor::randn(0f64, 1.0, shape, &Device::Cpu).unwrap()
    }

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn conv_matches_reference() {
        for (c, co, h, k, s, p) in [(3, 5, 9, 3, 1, 1), (4, 2, 8, 3, 2, 1), (2, 3, 7, 7, 2, 3), (6, 4, 5, 1, 1, 0), (3, 2, 8, 1, 2, 0)] {
            let x = rand(&[2, c, h, h]);
            let wt = rand(&[co, c, k, k]);
            let a = conv2d(&x, &wt, s, p).unwrap();
            let b = x.conv2d(&wt, p, s, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            assert!(max_diff(&a, &b) < 1e-10, "{:?}", (c, co, h, k, s, p));
        }
    }

    #[test]
    fn transposed_conv_matches_reference() {
        for (c, co, h, k, s, p) in [(3, 5, 4, 4, 2, 1), (2, 2, 3, 3, 1, 1), (4, 3, 5, 2, 2, 0)] {
            let x = rand(&[2, c, h, h]);
            let wt = rand(&[c, co, k, k]);
            let a = conv_transpose2d(&x, &wt, s, p).unwrap();
            let b = x.conv_transpose2d(&wt, p, 0, s, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            assert!(max_diff(&a, &b) < 1e-10, "{:?}", (c, co, h, k, s, p));
        }
    }

    #[test]
    fn gradients_match_reference() {
        let x = Var::from_tensor(&rand(&[2, 3, 6, 6])).unwrap();
        let w = Var::from_tensor(&rand(&[4, 3, 3, 3])).unwrap();
        let t = Var::from_tensor(&rand(&[4, 2, 4, 4])).unwrap();
        let probe = rand(&[2, 2, 6, 6]);
        let mine = conv_transpose2d(&conv2d(&x, &w, 2, 1).unwrap(), &t, 2, 1).unwrap();
        let reference = x.conv2d(&w, 1, 2, 1, 1).unwrap().conv_transpose2d(&t, 1, 0, 2, 1).unwrap();
        let ga = (mine * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        let gb = (reference * &probe).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &w, &t] {
            assert!(max_diff(ga.get(v).unwrap(), gb.get(v).unwrap()) < 1e-9);
        }
    }

    #[test]
    fn f32_and_shape_errors() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let w = Tensor::ones((1, 2, 3, 3), DType::F32, &Device::Cpu).unwrap();
        let y = conv2d(&x, &w, 1, 1).unwrap();
        assert_eq!(y.to_dtype(DType::F64).unwrap().max_all().unwrap().to_scalar::<f64>().unwrap(), 18.0);
        assert!(conv2d(&x, &Tensor::ones((1, 3, 3, 3), DType::F32, &Device::Cpu).unwrap(), 1, 1).is_err());
        // Non-contiguous inputs are copied first.
        let xt = x.transpose(2, 3).unwrap();
        assert!(conv2d(&xt, &w, 1, 1).is_ok());
    }
}
