//! Two-class per-pixel softmax cross-entropy.

use crate::error::{invalid, Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Loss value and gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: f64,
    pub grad_logits: Tensor<T>,
}

/// Weighted mean over pixels of `-log softmax(logits)[target]`.
///
/// `logits` is `(n, 2, h, w)`, `target` is `(n, 1, h, w)` holding 0 or 1, and
/// `class_weights` scales each pixel's term by the weight of its target
/// class. The mean divides by the pixel count `n * h * w`. Softmax and the
/// loss sum are evaluated in f64 with per-pixel max subtraction.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    target: &Tensor<T>,
    class_weights: (f64, f64),
) -> Result<LossOutput<T>> {
    let ls = logits.shape();
    if ls.c() != 2 {
        return Err(invalid(format!("softmax_cross_entropy needs 2 logit channels, got {ls}")));
    }
    let expected = Shape::new(ls.n(), 1, ls.h(), ls.w());
    if target.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: format!("logits {ls}"),
            right: format!("target {}", target.shape()),
        });
    }
    let plane = ls.plane_len();
    let pixels = (ls.n() * plane) as f64;
    let mut grad = vec![T::zero(); ls.numel()];
    let mut total = 0.0f64;
    for b in 0..ls.n() {
        let l = logits.image(b);
        let t = target.image(b);
        let g = &mut grad[b * 2 * plane..(b + 1) * 2 * plane];
        for p in 0..plane {
            let class = match t[p].to_f64_lossless() {
                0.0 => 0usize,
                1.0 => 1usize,
                v => return Err(invalid(format!("target value {v} is not 0 or 1"))),
            };
            let z0 = l[p].to_f64_lossless();
            let z1 = l[plane + p].to_f64_lossless();
            let m = z0.max(z1);
            let e0 = (z0 - m).exp();
            let e1 = (z1 - m).exp();
            let sum = e0 + e1;
            let lse = m + sum.ln();
            let weight = if class == 0 { class_weights.0 } else { class_weights.1 };
            let zt = if class == 0 { z0 } else { z1 };
            total += weight * (lse - zt);
            let scale = weight / pixels;
            let p0 = e0 / sum;
            let p1 = e1 / sum;
            g[p] = T::from_f64_lossy(scale * (p0 - if class == 0 { 1.0 } else { 0.0 }));
            g[plane + p] = T::from_f64_lossy(scale * (p1 - if class == 1 { 1.0 } else { 0.0 }));
        }
    }
    Ok(LossOutput { loss: total / pixels, grad_logits: Tensor::from_parts(ls, grad) })
}
