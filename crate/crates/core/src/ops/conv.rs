//! 2-D convolution and transposed convolution, forward and backward.
//!
//! Both directions are lowered onto three im2col primitives:
//!
//! - `forward_core`: `y = W * im2col(x)`
//! - `input_grad_core`: `dx = col2im(W^T * dy)`
//! - `weight_grad_core`: `dW = dy * im2col(x)^T`
//!
//! A transposed convolution with kernel `W` is the adjoint of the
//! convolution with the same kernel, so its forward is `input_grad_core`
//! and its input gradient is `forward_core`.
//!
//! Spatial positions are processed in fixed-size chunks; the chunking never
//! depends on the thread count, so results are bit-identical across runs.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::tensor::{gemm, MatRef, Scalar, Shape, Tensor};

/// Output positions per im2col chunk.
const CHUNK: usize = 256;

/// Learnable parameters and geometry of one convolution layer.
///
/// Kernel layout is `(out_channels, in_channels, kh, kw)` for
/// [`conv2d_forward`]. For [`transposed_conv2d_forward`] the same tensor is
/// read as `(in_channels, out_channels, kh, kw)`: the kernel of the
/// convolution it is the adjoint of. Bias has one entry per output channel
/// in either case.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec<T> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, bias: Vec<T>, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(invalid("convolution stride must be positive"));
        }
        Ok(ConvSpec { kernel, bias, stride, padding })
    }

    pub fn zeros(kernel: Shape, bias_len: usize, stride: usize, padding: usize) -> Result<Self> {
        Self::new(Tensor::zeros(kernel), vec![T::zero(); bias_len], stride, padding)
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }
}

/// Gradients of a (transposed) convolution with respect to its input,
/// kernel and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Geometry of a regular convolution `x (cin, h, w) -> y (cout, oh, ow)`.
#[derive(Clone, Copy, Debug)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let p = self.positions();
        (0..p).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(p))).collect()
    }
}

fn conv_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

fn transposed_out_dim(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    if size == 0 {
        return None;
    }
    let full = (size - 1) * stride + k;
    full.checked_sub(2 * pad).filter(|&d| d > 0)
}

fn check_bias<T: Scalar>(op: &'static str, spec: &ConvSpec<T>, channels: usize) -> Result<()> {
    if spec.bias.len() != channels {
        return Err(Error::ShapeMismatch {
            op,
            left: format!("kernel {} expects {channels} biases", spec.kernel.shape()),
            right: format!("{} biases", spec.bias.len()),
        });
    }
    if spec.stride == 0 {
        return Err(invalid(format!("{op}: stride must be positive")));
    }
    Ok(())
}

fn conv_geometry<T: Scalar>(op: &'static str, input: Shape, spec: &ConvSpec<T>) -> Result<Geometry> {
    let ks = spec.kernel.shape();
    if input.c() != ks.c() {
        return Err(Error::ShapeMismatch {
            op,
            left: format!("input {input}"),
            right: format!("kernel {ks}"),
        });
    }
    check_bias(op, spec, ks.n())?;
    let dims = conv_out_dim(input.h(), ks.h(), spec.stride, spec.padding)
        .zip(conv_out_dim(input.w(), ks.w(), spec.stride, spec.padding));
    match dims {
        Some((oh, ow)) if oh > 0 && ow > 0 && input.h() > 0 && input.w() > 0 => Ok(Geometry {
            cin: input.c(),
            h: input.h(),
            w: input.w(),
            kh: ks.h(),
            kw: ks.w(),
            stride: spec.stride,
            pad: spec.padding,
            oh,
            ow,
        }),
        _ => Err(Error::NonPositiveOutput {
            op,
            detail: format!(
                "input {input}, kernel {ks}, stride {}, padding {}",
                spec.stride, spec.padding
            ),
        }),
    }
}

/// Geometry of the convolution whose adjoint is the transposed convolution
/// of `input` by `spec`.
fn transposed_geometry<T: Scalar>(
    op: &'static str,
    input: Shape,
    spec: &ConvSpec<T>,
) -> Result<Geometry> {
    let ks = spec.kernel.shape();
    if input.c() != ks.n() {
        return Err(Error::ShapeMismatch {
            op,
            left: format!("input {input}"),
            right: format!("kernel {ks}"),
        });
    }
    check_bias(op, spec, ks.c())?;
    let dims = transposed_out_dim(input.h(), ks.h(), spec.stride, spec.padding)
        .zip(transposed_out_dim(input.w(), ks.w(), spec.stride, spec.padding));
    match dims {
        Some((h, w)) => Ok(Geometry {
            cin: ks.c(),
            h,
            w,
            kh: ks.h(),
            kw: ks.w(),
            stride: spec.stride,
            pad: spec.padding,
            oh: input.h(),
            ow: input.w(),
        }),
        None => Err(Error::NonPositiveOutput {
            op,
            detail: format!(
                "input {input}, kernel {ks}, stride {}, padding {}",
                spec.stride, spec.padding
            ),
        }),
    }
}

/// Output shape of [`conv2d_forward`].
pub fn conv2d_output_shape<T: Scalar>(input: Shape, spec: &ConvSpec<T>) -> Result<Shape> {
    let g = conv_geometry("conv2d", input, spec)?;
    Ok(Shape::new(input.n(), spec.kernel.shape().n(), g.oh, g.ow))
}

/// Output shape of [`transposed_conv2d_forward`].
pub fn transposed_conv2d_output_shape<T: Scalar>(input: Shape, spec: &ConvSpec<T>) -> Result<Shape> {
    let g = transposed_geometry("transposed_conv2d", input, spec)?;
    Ok(Shape::new(input.n(), g.cin, g.h, g.w))
}

/// Fills `out` with the im2col rows for output positions `p0..p1`; row `r`
/// is the zero-padded receptive field of position `p0 + r`, ordered
/// `(ci, ky, kx)` to match the kernel layout.
fn im2col_rows<T: Scalar>(img: &[T], g: &Geometry, p0: usize, p1: usize, out: &mut Vec<T>) {
    let k = g.patch_len();
    out.clear();
    out.resize((p1 - p0) * k, T::zero());
    let plane = g.h * g.w;
    for p in p0..p1 {
        let (oy, ox) = (p / g.ow, p % g.ow);
        let row = &mut out[(p - p0) * k..(p - p0 + 1) * k];
        let mut col = 0;
        for ci in 0..g.cin {
            let src = &img[ci * plane..(ci + 1) * plane];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    col += g.kw;
                    continue;
                }
                let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        row[col] = line[ix as usize];
                    }
                    col += 1;
                }
            }
        }
    }
}

/// Scatter-adds im2col rows for positions `p0..p1` back into `img`.
fn col2im_rows<T: Scalar>(cols: &[T], g: &Geometry, p0: usize, p1: usize, img: &mut [T]) {
    let k = g.patch_len();
    let plane = g.h * g.w;
    for p in p0..p1 {
        let (oy, ox) = (p / g.ow, p % g.ow);
        let row = &cols[(p - p0) * k..(p - p0 + 1) * k];
        let mut col = 0;
        for ci in 0..g.cin {
            let dst = &mut img[ci * plane..(ci + 1) * plane];
            for ky in 0..g.kh {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy as usize >= g.h {
                    col += g.kw;
                    continue;
                }
                let base = iy as usize * g.w;
                for kx in 0..g.kw {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix >= 0 && (ix as usize) < g.w {
                        let d = &mut dst[base + ix as usize];
                        *d = *d + row[col];
                    }
                    col += 1;
                }
            }
        }
    }
}

/// `y[b] = W * im2col(x[b]) (+ bias)`; `kernel` is `cout x patch_len`.
fn forward_core<T: Scalar>(
    x: &Tensor<T>,
    kernel: &[T],
    cout: usize,
    bias: Option<&[T]>,
    g: &Geometry,
) -> Tensor<T> {
    let n = x.shape().n();
    let p = g.positions();
    let k = g.patch_len();
    let mut out = vec![T::zero(); n * cout * p];
    let w = MatRef::row_major(kernel, cout, k);
    for (b, dst) in out.chunks_mut(cout * p).enumerate() {
        let img = x.image(b);
        if g.is_pointwise() {
            gemm(w, MatRef::row_major(img, g.cin, p), T::zero(), dst);
        } else {
            let parts: Vec<(usize, usize, Vec<T>)> = g
                .chunks()
                .into_par_iter()
                .map_init(Vec::new, |cols, (p0, p1)| {
                    im2col_rows(img, g, p0, p1, cols);
                    let len = p1 - p0;
                    let mut part = vec![T::zero(); cout * len];
                    gemm(w, MatRef::row_major(cols, len, k).t(), T::zero(), &mut part);
                    (p0, p1, part)
                })
                .collect();
            for (p0, p1, part) in parts {
                let len = p1 - p0;
                for co in 0..cout {
                    dst[co * p + p0..co * p + p1].copy_from_slice(&part[co * len..(co + 1) * len]);
                }
            }
        }
        if let Some(bias) = bias {
            for (co, plane) in dst.chunks_mut(p).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
    }
    Tensor::from_parts(Shape::new(n, cout, g.oh, g.ow), out)
}

/// `dx[b] = col2im(W^T * dy[b])`, giving a `(n, cin, h, w)` tensor.
fn input_grad_core<T: Scalar>(dy: &Tensor<T>, kernel: &[T], g: &Geometry) -> Tensor<T> {
    let n = dy.shape().n();
    let cout = dy.shape().c();
    let p = g.positions();
    let k = g.patch_len();
    let w = MatRef::row_major(kernel, cout, k);
    let img_len = g.cin * g.h * g.w;
    let images: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let gy = dy.image(b);
            let mut dx = vec![T::zero(); img_len];
            if g.is_pointwise() {
                gemm(w.t(), MatRef::row_major(gy, cout, p), T::zero(), &mut dx);
                return dx;
            }
            let mut dcols = Vec::new();
            for (p0, p1) in g.chunks() {
                let len = p1 - p0;
                dcols.clear();
                dcols.resize(len * k, T::zero());
                let gy_t = MatRef {
                    data: gy,
                    offset: p0,
                    rows: len,
                    cols: cout,
                    row_stride: 1,
                    col_stride: p,
                };
                gemm(gy_t, w, T::zero(), &mut dcols);
                col2im_rows(&dcols, g, p0, p1, &mut dx);
            }
            dx
        })
        .collect();
    Tensor::from_parts(Shape::new(n, g.cin, g.h, g.w), images.concat())
}

/// `dW = sum_b dy[b] * im2col(x[b])^T`, a `cout x patch_len` matrix.
fn weight_grad_core<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, g: &Geometry) -> Vec<T> {
    let n = x.shape().n();
    let cout = dy.shape().c();
    let p = g.positions();
    let k = g.patch_len();
    let partials: Vec<Vec<T>> = (0..n)
        .into_par_iter()
        .map(|b| {
            let img = x.image(b);
            let gy = dy.image(b);
            let mut dw = vec![T::zero(); cout * k];
            if g.is_pointwise() {
                gemm(
                    MatRef::row_major(gy, cout, p),
                    MatRef::row_major(img, g.cin, p).t(),
                    T::zero(),
                    &mut dw,
                );
                return dw;
            }
            let mut cols = Vec::new();
            for (p0, p1) in g.chunks() {
                let len = p1 - p0;
                im2col_rows(img, g, p0, p1, &mut cols);
                let gy_chunk = MatRef {
                    data: gy,
                    offset: p0,
                    rows: cout,
                    cols: len,
                    row_stride: p,
                    col_stride: 1,
                };
                gemm(gy_chunk, MatRef::row_major(&cols, len, k), T::one(), &mut dw);
            }
            dw
        })
        .collect();
    let mut total = vec![T::zero(); cout * k];
    for part in partials {
        total.iter_mut().zip(part).for_each(|(t, v)| *t = *t + v);
    }
    total
}

/// Per-channel sum over batch and space, accumulated in f64.
pub(crate) fn channel_sums<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let s = t.shape();
    let plane = s.plane_len();
    let mut sums = vec![0.0f64; s.c()];
    for b in 0..s.n() {
        for (c, chunk) in t.image(b).chunks(plane).enumerate() {
            sums[c] += chunk.iter().map(|v| v.to_f64_lossless()).sum::<f64>();
        }
    }
    sums.into_iter().map(T::from_f64_lossy).collect()
}

/// Zero-padded strided cross-correlation plus bias.
pub fn conv2d_forward<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let g = conv_geometry("conv2d_forward", input.shape(), spec)?;
    let cout = spec.kernel.shape().n();
    Ok(forward_core(input, spec.kernel.data(), cout, Some(&spec.bias), &g))
}

/// Gradients of `sum(grad_out * conv2d_forward(input, spec))`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = conv_geometry("conv2d_backward", input.shape(), spec)?;
    let expected = Shape::new(input.shape().n(), spec.kernel.shape().n(), g.oh, g.ow);
    crate::tensor::ensure_same_shape("conv2d_backward grad_out", expected, grad_out.shape())?;
    let dx = input_grad_core(grad_out, spec.kernel.data(), &g);
    let dw = weight_grad_core(input, grad_out, &g);
    Ok(ConvGrads {
        input: dx,
        kernel: Tensor::from_parts(spec.kernel.shape(), dw),
        bias: channel_sums(grad_out),
    })
}

/// Learnable upsampling: scatter-accumulates every input value weighted by
/// the kernel, the adjoint of [`conv2d_forward`] with the same kernel.
/// Output dims are `(h - 1) * stride - 2 * padding + kh`.
pub fn transposed_conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
) -> Result<Tensor<T>> {
    let g = transposed_geometry("transposed_conv2d_forward", input.shape(), spec)?;
    let mut out = input_grad_core(input, spec.kernel.data(), &g);
    let plane = g.h * g.w;
    let cout = g.cin;
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let bv = spec.bias[i % cout];
        chunk.iter_mut().for_each(|v| *v = *v + bv);
    }
    Ok(out)
}

/// Gradients of `sum(grad_out * transposed_conv2d_forward(input, spec))`.
pub fn transposed_conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let g = transposed_geometry("transposed_conv2d_backward", input.shape(), spec)?;
    let expected = Shape::new(input.shape().n(), g.cin, g.h, g.w);
    crate::tensor::ensure_same_shape("transposed_conv2d_backward grad_out", expected, grad_out.shape())?;
    let cin_t = spec.kernel.shape().n();
    let dx = forward_core(grad_out, spec.kernel.data(), cin_t, None, &g);
    let dw = weight_grad_core(grad_out, input, &g);
    Ok(ConvGrads {
        input: dx,
        kernel: Tensor::from_parts(spec.kernel.shape(), dw),
        bias: channel_sums(grad_out),
    })
}
