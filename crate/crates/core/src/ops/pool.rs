//! 2x2 max-pooling with recorded argmax indices, and the matching unpool.

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Shape, Tensor};

/// Argmax locations recorded by [`maxpool2x2`].
///
/// One entry per pooled element: the flat `(n, c, h, w)` offset of the
/// window maximum in the pre-pool tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PoolIndices {
    pooled: Shape,
    source: Shape,
    indices: Vec<usize>,
}

impl PoolIndices {
    pub fn pooled_shape(&self) -> Shape {
        self.pooled
    }

    pub fn source_shape(&self) -> Shape {
        self.source
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.indices
    }
}

/// Halves `h` and `w`, keeping each 2x2 window's maximum.
///
/// Ties go to the lowest flat index, so unpooling is deterministic.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let s = input.shape();
    if s.h() % 2 != 0 || s.w() % 2 != 0 || s.h() == 0 || s.w() == 0 {
        return Err(Error::InvalidArgument(format!(
            "maxpool2x2 needs even, non-zero spatial dims, got {s}; pad or resize inputs upstream \
             so height and width are divisible by 16"
        )));
    }
    let (oh, ow) = (s.h() / 2, s.w() / 2);
    let pooled = Shape::new(s.n(), s.c(), oh, ow);
    let data = input.data();
    let mut out = Vec::with_capacity(pooled.numel());
    let mut indices = Vec::with_capacity(pooled.numel());
    for plane in 0..s.n() * s.c() {
        let base = plane * s.plane_len();
        for oy in 0..oh {
            for ox in 0..ow {
                let top = base + 2 * oy * s.w() + 2 * ox;
                // Ascending flat-index order within the window.
                let cands = [top, top + 1, top + s.w(), top + s.w() + 1];
                let mut best = cands[0];
                for &c in &cands[1..] {
                    if data[c] > data[best] {
                        best = c;
                    }
                }
                out.push(data[best]);
                indices.push(best);
            }
        }
    }
    Ok((Tensor::from_parts(pooled, out), PoolIndices { pooled, source: s, indices }))
}

/// Routes each pooled gradient back to its argmax location.
pub fn maxpool2x2_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("maxpool2x2_backward", indices.pooled, grad_out.shape())?;
    let mut dx = Tensor::zeros(indices.source);
    let dst = dx.data_mut();
    for (&i, &g) in indices.indices.iter().zip(grad_out.data()) {
        dst[i] = dst[i] + g;
    }
    Ok(dx)
}

/// Places every input value at its recorded argmax site; zeros elsewhere.
pub fn maxunpool2x2<T: Scalar>(
    input: &Tensor<T>,
    indices: &PoolIndices,
    out_shape: Shape,
) -> Result<Tensor<T>> {
    ensure_same_shape("maxunpool2x2 input", indices.pooled, input.shape())?;
    ensure_same_shape("maxunpool2x2 out_shape", indices.source, out_shape)?;
    let mut out = Tensor::zeros(out_shape);
    let dst = out.data_mut();
    for (&i, &v) in indices.indices.iter().zip(input.data()) {
        dst[i] = v;
    }
    Ok(out)
}

/// Gathers the output gradient at each recorded argmax site.
pub fn maxunpool2x2_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape("maxunpool2x2_backward", indices.source, grad_out.shape())?;
    let src = grad_out.data();
    let data = indices.indices.iter().map(|&i| src[i]).collect();
    Ok(Tensor::from_parts(indices.pooled, data))
}
