//! Central-difference verification of the hand-written backward passes.
//!
//! An op under test maps a list of f64 tensors to one output tensor. The
//! harness contracts the output with a fixed pseudo-random probe `R`, so the
//! scalar objective is `L(x) = <op(x), R>`; the analytic gradient is
//! `op.backward(x, R)` and the numeric one perturbs every coordinate of
//! every input by `+-eps`. Only `forward` is used for the numeric side.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::ops::{self, ConvSpec, PoolIndices};
use crate::tensor::{Shape, Tensor};

const PROBE_SEED: u64 = 0x9e37_79b9;

/// An op with a registered forward and, optionally, backward.
pub trait Differentiable {
    fn name(&self) -> &str;

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>>;

    /// Gradients of `<forward(inputs), grad_out>` with respect to each input.
    fn backward(&self, _inputs: &[Tensor<f64>], _grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Err(Error::NoBackward(self.name().to_string()))
    }
}

/// Max over all input coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(op: &dyn Differentiable, inputs: &[Tensor<f64>], eps: f64) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }
    let out = op.forward(inputs)?;
    let probe = probe_tensor(out.shape());
    let analytic = op.backward(inputs, &probe)?;
    if analytic.len() != inputs.len() {
        return Err(invalid(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    let objective = |xs: &[Tensor<f64>]| -> Result<f64> { op.forward(xs)?.dot(&probe) };

    let mut worst = 0.0f64;
    let mut perturbed = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                left: inputs[i].shape().to_string(),
                right: grad.shape().to_string(),
            });
        }
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            perturbed[i].data_mut()[j] = orig + eps;
            let plus = objective(&perturbed)?;
            perturbed[i].data_mut()[j] = orig - eps;
            let minus = objective(&perturbed)?;
            perturbed[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Random signs times magnitudes in `[0.5, 1.5)`.
fn probe_tensor(shape: Shape) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
    let data = (0..shape.numel())
        .map(|_| {
            let m: f64 = rng.random_range(0.5..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Tensor with i.i.d. uniform entries in `[lo, hi)`.
pub fn uniform_tensor(shape: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel()).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_parts(shape, data)
}

/// Uniform entries in `[-1, 1)` with `|x| > margin`, for probing ReLU away
/// from its kink.
pub fn kink_free_tensor(shape: Shape, seed: u64, margin: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.numel())
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.0..1.0);
            if v.abs() > margin {
                break v;
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

fn bias_tensor(bias: &[f64]) -> Tensor<f64> {
    Tensor::from_parts(Shape::new(1, bias.len(), 1, 1), bias.to_vec())
}

fn expect_inputs(name: &str, inputs: &[Tensor<f64>], n: usize) -> Result<()> {
    if inputs.len() != n {
        return Err(invalid(format!("{name} takes {n} inputs, got {}", inputs.len())));
    }
    Ok(())
}

/// `conv2d_forward` over inputs `[x, kernel, bias (1, cout, 1, 1)]`.
pub struct Conv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dOp {
    fn spec(&self, inputs: &[Tensor<f64>]) -> Result<ConvSpec<f64>> {
        expect_inputs("conv2d", inputs, 3)?;
        ConvSpec::new(inputs[1].clone(), inputs[2].data().to_vec(), self.stride, self.padding)
    }
}

impl Differentiable for Conv2dOp {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::conv2d_forward(&inputs[0], &self.spec(inputs)?)
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let g = ops::conv2d_backward(&inputs[0], &self.spec(inputs)?, grad_out)?;
        Ok(vec![g.input, g.kernel, bias_tensor(&g.bias)])
    }
}

/// `transposed_conv2d_forward` over inputs `[x, kernel, bias]`.
pub struct TransposedConv2dOp {
    pub stride: usize,
    pub padding: usize,
}

impl TransposedConv2dOp {
    fn spec(&self, inputs: &[Tensor<f64>]) -> Result<ConvSpec<f64>> {
        expect_inputs("transposed_conv2d", inputs, 3)?;
        ConvSpec::new(inputs[1].clone(), inputs[2].data().to_vec(), self.stride, self.padding)
    }
}

impl Differentiable for TransposedConv2dOp {
    fn name(&self) -> &str {
        "transposed_conv2d"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        ops::transposed_conv2d_forward(&inputs[0], &self.spec(inputs)?)
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let g = ops::transposed_conv2d_backward(&inputs[0], &self.spec(inputs)?, grad_out)?;
        Ok(vec![g.input, g.kernel, bias_tensor(&g.bias)])
    }
}

pub struct MaxPoolOp;

impl Differentiable for MaxPoolOp {
    fn name(&self) -> &str {
        "maxpool2x2"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs(self.name(), inputs, 1)?;
        Ok(ops::maxpool2x2(&inputs[0])?.0)
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let (_, idx) = ops::maxpool2x2(&inputs[0])?;
        Ok(vec![ops::maxpool2x2_backward(&idx, grad_out)?])
    }
}

/// Unpooling with fixed indices (linear in its input).
pub struct MaxUnpoolOp {
    pub indices: PoolIndices,
}

impl Differentiable for MaxUnpoolOp {
    fn name(&self) -> &str {
        "maxunpool2x2"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs(self.name(), inputs, 1)?;
        ops::maxunpool2x2(&inputs[0], &self.indices, self.indices.source_shape())
    }

    fn backward(&self, _inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::maxunpool2x2_backward(&self.indices, grad_out)?])
    }
}

pub struct ReluOp;

impl Differentiable for ReluOp {
    fn name(&self) -> &str {
        "relu"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs(self.name(), inputs, 1)?;
        Ok(ops::relu(&inputs[0]))
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![ops::relu_backward(&inputs[0], grad_out)?])
    }
}

pub struct AddOp;

impl Differentiable for AddOp {
    fn name(&self) -> &str {
        "add"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs(self.name(), inputs, 2)?;
        ops::add(&inputs[0], &inputs[1])
    }

    fn backward(&self, _inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![grad_out.clone(), grad_out.clone()])
    }
}

/// Softmax cross-entropy over `[logits]`; output is the loss as a
/// `(1, 1, 1, 1)` tensor.
pub struct SoftmaxCrossEntropyOp {
    pub target: Tensor<f64>,
    pub class_weights: (f64, f64),
}

impl Differentiable for SoftmaxCrossEntropyOp {
    fn name(&self) -> &str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
        expect_inputs(self.name(), inputs, 1)?;
        let out = ops::softmax_cross_entropy(&inputs[0], &self.target, self.class_weights)?;
        Ok(Tensor::from_parts(Shape::new(1, 1, 1, 1), vec![out.loss]))
    }

    fn backward(&self, inputs: &[Tensor<f64>], grad_out: &Tensor<f64>) -> Result<Vec<Tensor<f64>>> {
        let out = ops::softmax_cross_entropy(&inputs[0], &self.target, self.class_weights)?;
        let scale = grad_out.data()[0];
        let data = out.grad_logits.data().iter().map(|g| g * scale).collect();
        Ok(vec![Tensor::from_parts(out.grad_logits.shape(), data)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ForwardOnly;

    impl Differentiable for ForwardOnly {
        fn name(&self) -> &str {
            "square"
        }
        fn forward(&self, inputs: &[Tensor<f64>]) -> Result<Tensor<f64>> {
            let x = &inputs[0];
            Ok(Tensor::from_parts(x.shape(), x.data().iter().map(|v| v * v).collect()))
        }
    }

    #[test]
    fn missing_backward_rejected() {
        let x = uniform_tensor(Shape::new(1, 1, 2, 2), 1, -1.0, 1.0);
        assert!(matches!(grad_check(&ForwardOnly, &[x], 1e-5), Err(Error::NoBackward(_))));
    }

    #[test]
    fn eps_range_enforced() {
        let x = uniform_tensor(Shape::new(1, 1, 2, 2), 1, -1.0, 1.0);
        assert!(grad_check(&ReluOp, std::slice::from_ref(&x), 1e-2).is_err());
        assert!(grad_check(&ReluOp, &[x], 1e-9).is_err());
    }

    #[test]
    fn add_is_exact() {
        let a = uniform_tensor(Shape::new(1, 2, 3, 3), 2, -1.0, 1.0);
        let b = uniform_tensor(Shape::new(1, 2, 3, 3), 3, -1.0, 1.0);
        let err = grad_check(&AddOp, &[a, b], 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn kink_free_sampler_respects_margin() {
        let t = kink_free_tensor(Shape::new(1, 1, 10, 10), 4, 0.3);
        assert!(t.data().iter().all(|v| v.abs() > 0.3));
    }
}
