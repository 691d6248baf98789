use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{LayerInfo, LayerRole, NetworkConfig, Plan};
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, PoolIndices};
use crate::tensor::{Scalar, Shape, Tensor};

/// Forward-pass mode. The network has no stochastic layers, so both modes
/// compute the same function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub info: LayerInfo,
    pub spec: ConvSpec<T>,
}

/// Learnable weights of the network, in [`Plan`] layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: NetworkConfig,
    plan: Plan,
    layers: Vec<Layer<T>>,
}

/// Gradient of one layer's kernel and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrad<T> {
    pub kernel: Tensor<T>,
    pub bias: Vec<T>,
}

/// Gradients aligned one-to-one with [`Model::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub params: Vec<ParamGrad<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Gradients<T> {
        Gradients {
            params: model
                .layers
                .iter()
                .map(|l| ParamGrad { kernel: Tensor::zeros(l.spec.kernel.shape()), bias: vec![T::zero(); l.spec.bias.len()] })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BackwardOutput<T> {
    pub loss: f64,
    pub gradients: Gradients<T>,
    /// Pixels whose argmax class matches the target.
    pub correct_pixels: usize,
    pub total_pixels: usize,
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Output of each residual block, before its pool.
    pub block_outputs: Vec<Tensor<T>>,
    /// Encoder output after the last pool.
    pub bottleneck: Tensor<T>,
    /// Decoder output fed to the classifier.
    pub decoder_output: Tensor<T>,
    pub logits: Tensor<T>,
}

struct SegmentTape<T> {
    /// Input of each conv; the first is the segment input.
    conv_inputs: Vec<Tensor<T>>,
    /// ReLU output of each conv.
    activations: Vec<Tensor<T>>,
}

struct BlockTape<T> {
    segments: Vec<SegmentTape<T>>,
    pool: PoolIndices,
}

struct StageTape<T> {
    /// Conv input: the previous stage's output, or the unpooled tensor.
    input: Tensor<T>,
    output: Tensor<T>,
}

#[derive(Default)]
struct Tape<T> {
    blocks: Vec<BlockTape<T>>,
    stages: Vec<StageTape<T>>,
    head_input: Option<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    /// Instantiates the network with He fan-in normal kernels and zero
    /// biases, drawn in layer order from a ChaCha8 stream seeded by `seed`.
    pub fn build(config: NetworkConfig, seed: u64) -> Result<Model<T>> {
        let plan = Plan::new(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(plan.layers.len());
        for info in &plan.layers {
            let std = (2.0 / info.fan_in() as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("positive std");
            let data = (0..info.kernel_shape.numel()).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
            let spec = ConvSpec::new(
                Tensor::from_parts(info.kernel_shape, data),
                vec![T::zero(); info.bias_len],
                info.stride,
                info.padding,
            )?;
            layers.push(Layer { info: info.clone(), spec });
        }
        Ok(Model { config, plan, layers })
    }

    /// Assembles a model from explicit layer parameters in plan order.
    pub fn from_specs(config: NetworkConfig, specs: Vec<ConvSpec<T>>) -> Result<Model<T>> {
        let plan = Plan::new(&config)?;
        if specs.len() != plan.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} layers, got {}",
                plan.layers.len(),
                specs.len()
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (info, spec) in plan.layers.iter().zip(specs) {
            if spec.kernel.shape() != info.kernel_shape || spec.bias.len() != info.bias_len {
                return Err(Error::ShapeMismatch {
                    op: "Model::from_specs",
                    left: format!("{} expects kernel {} / {} biases", info.name, info.kernel_shape, info.bias_len),
                    right: format!("kernel {} / {} biases", spec.kernel.shape(), spec.bias.len()),
                });
            }
            let spec = ConvSpec { stride: info.stride, padding: info.padding, ..spec };
            layers.push(Layer { info: info.clone(), spec });
        }
        Ok(Model { config, plan, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn plan(&self) -> &Plan {
        &self.plan
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.spec.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.spec.kernel.is_finite() && l.spec.bias.iter().all(|b| b.is_finite()))
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            plan: self.plan.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    info: l.info.clone(),
                    spec: ConvSpec {
                        kernel: l.spec.kernel.cast(),
                        bias: l.spec.bias.iter().map(|&b| U::from_f64_lossy(b.to_f64_lossless())).collect(),
                        stride: l.spec.stride,
                        padding: l.spec.padding,
                    },
                })
                .collect(),
        }
    }

    fn check_batch(&self, batch: &Tensor<T>) -> Result<()> {
        let s = batch.shape();
        let expected = self.config.input_shape(s.n());
        if s != expected || s.n() == 0 {
            return Err(Error::ShapeMismatch {
                op: "Model::forward",
                left: format!("network expects (n,{},{},{})", expected.c(), expected.h(), expected.w()),
                right: format!("batch {s}"),
            });
        }
        Ok(())
    }

    fn spec(&self, layer: usize) -> &ConvSpec<T> {
        &self.layers[layer].spec
    }

    fn conv_relu(&self, layer: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let spec = self.spec(layer);
        let z = if self.layers[layer].info.role.is_transposed() {
            ops::transposed_conv2d_forward(x, spec)?
        } else {
            ops::conv2d_forward(x, spec)?
        };
        Ok(ops::relu(&z))
    }

    fn run(
        &self,
        batch: &Tensor<T>,
        mut tape: Option<&mut Tape<T>>,
        mut trace: Option<&mut Vec<Tensor<T>>>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        self.check_batch(batch)?;
        let mut x = batch.clone();
        let mut pools = Vec::with_capacity(self.plan.blocks.len());
        for block in &self.plan.blocks {
            let mut seg_tapes = Vec::new();
            for seg in &block.segments {
                let seg_in = x;
                let mut conv_inputs = Vec::new();
                let mut activations = Vec::new();
                let mut a = seg_in.clone();
                for &l in &seg.convs {
                    let out = self.conv_relu(l, &a)?;
                    if tape.is_some() {
                        conv_inputs.push(a);
                        activations.push(out.clone());
                    }
                    a = out;
                }
                let skip = match seg.projection {
                    Some(p) => ops::conv2d_forward(&seg_in, self.spec(p))?,
                    None => seg_in,
                };
                ops::add_assign(&mut a, &skip)?;
                x = a;
                if tape.is_some() {
                    seg_tapes.push(SegmentTape { conv_inputs, activations });
                }
            }
            if let Some(t) = trace.as_deref_mut() {
                t.push(x.clone());
            }
            let (pooled, idx) = ops::maxpool2x2(&x)?;
            if let Some(t) = tape.as_deref_mut() {
                t.blocks.push(BlockTape { segments: seg_tapes, pool: idx.clone() });
            }
            pools.push(idx);
            x = pooled;
        }
        let bottleneck = x.clone();
        for (s, &l) in self.plan.decoder.iter().enumerate() {
            let input = if self.layers[l].info.role == LayerRole::DecoderConv {
                let idx = &pools[pools.len() - 1 - s];
                ops::maxunpool2x2(&x, idx, idx.source_shape())?
            } else {
                x
            };
            let out = self.conv_relu(l, &input)?;
            if let Some(t) = tape.as_deref_mut() {
                t.stages.push(StageTape { input, output: out.clone() });
            }
            x = out;
        }
        let logits = ops::conv2d_forward(&x, self.spec(self.plan.classifier))?;
        if let Some(t) = tape {
            t.head_input = Some(x.clone());
        }
        Ok((bottleneck, x, logits))
    }

    /// Per-pixel class logits `(n, 2, h, w)` for a batch `(n, c, h, w)`.
    pub fn forward(&self, batch: &Tensor<T>, _mode: Mode) -> Result<Tensor<T>> {
        Ok(self.run(batch, None, None)?.2)
    }

    pub fn forward_trace(&self, batch: &Tensor<T>) -> Result<ForwardTrace<T>> {
        let mut block_outputs = Vec::new();
        let (bottleneck, decoder_output, logits) = self.run(batch, None, Some(&mut block_outputs))?;
        Ok(ForwardTrace { block_outputs, bottleneck, decoder_output, logits })
    }

    /// Binary mask `(n, 1, h, w)`: 1 where the exudate logit beats background.
    pub fn predict_mask(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(argmax_mask(&self.forward(batch, Mode::Eval)?))
    }

    /// Loss and gradients for every learnable tensor.
    pub fn backward(
        &self,
        batch: &Tensor<T>,
        target: &Tensor<T>,
        class_weights: (f64, f64),
    ) -> Result<(f64, Gradients<T>)> {
        let out = self.backward_with_stats(batch, target, class_weights)?;
        Ok((out.loss, out.gradients))
    }

    pub fn backward_with_stats(
        &self,
        batch: &Tensor<T>,
        target: &Tensor<T>,
        class_weights: (f64, f64),
    ) -> Result<BackwardOutput<T>> {
        let mut tape = Tape::default();
        let (_, _, logits) = self.run(batch, Some(&mut tape), None)?;
        let loss = ops::softmax_cross_entropy(&logits, target, class_weights)?;
        let (correct_pixels, total_pixels) = pixel_agreement(&logits, target);
        let mut grads = Gradients::zeros_like(self);

        let head = self.plan.classifier;
        let head_input = tape.head_input.take().expect("recorded");
        let g = ops::conv2d_backward(&head_input, self.spec(head), &loss.grad_logits)?;
        grads.params[head] = ParamGrad { kernel: g.kernel, bias: g.bias };
        let mut grad = g.input;

        for (s, &l) in self.plan.decoder.iter().enumerate().rev() {
            let stage = &tape.stages[s];
            let gz = ops::masked_by_positive(&stage.output, &grad);
            let spec = self.spec(l);
            let g = if self.layers[l].info.role.is_transposed() {
                ops::transposed_conv2d_backward(&stage.input, spec, &gz)?
            } else {
                ops::conv2d_backward(&stage.input, spec, &gz)?
            };
            grads.params[l] = ParamGrad { kernel: g.kernel, bias: g.bias };
            grad = if self.layers[l].info.role == LayerRole::DecoderConv {
                let idx = &tape.blocks[tape.blocks.len() - 1 - s].pool;
                ops::maxunpool2x2_backward(idx, &g.input)?
            } else {
                g.input
            };
        }

        for (b, block) in self.plan.blocks.iter().enumerate().rev() {
            let bt = &tape.blocks[b];
            grad = ops::maxpool2x2_backward(&bt.pool, &grad)?;
            for (s, seg) in block.segments.iter().enumerate().rev() {
                let st = &bt.segments[s];
                let skip_grad = grad.clone();
                for (i, &l) in seg.convs.iter().enumerate().rev() {
                    let gz = ops::masked_by_positive(&st.activations[i], &grad);
                    let g = ops::conv2d_backward(&st.conv_inputs[i], self.spec(l), &gz)?;
                    grads.params[l] = ParamGrad { kernel: g.kernel, bias: g.bias };
                    grad = g.input;
                }
                let seg_in = &st.conv_inputs[0];
                match seg.projection {
                    Some(p) => {
                        let g = ops::conv2d_backward(seg_in, self.spec(p), &skip_grad)?;
                        grads.params[p] = ParamGrad { kernel: g.kernel, bias: g.bias };
                        ops::add_assign(&mut grad, &g.input)?;
                    }
                    None => ops::add_assign(&mut grad, &skip_grad)?,
                }
            }
        }
        Ok(BackwardOutput { loss: loss.loss, gradients: grads, correct_pixels, total_pixels })
    }

    /// Output of encoder block `block` (before pooling) for an input already
    /// at that block's resolution and channel count.
    pub fn block_forward(&self, block: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let plan = self
            .plan
            .blocks
            .get(block)
            .ok_or_else(|| Error::InvalidArgument(format!("no encoder block {block}")))?;
        let mut x = x.clone();
        for seg in &plan.segments {
            let mut a = x.clone();
            for &l in &seg.convs {
                a = self.conv_relu(l, &a)?;
            }
            let skip = match seg.projection {
                Some(p) => ops::conv2d_forward(&x, self.spec(p))?,
                None => x,
            };
            ops::add_assign(&mut a, &skip)?;
            x = a;
        }
        Ok(x)
    }
}

/// Class-1-beats-class-0 mask from `(n, 2, h, w)` logits; ties go to background.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let s = logits.shape();
    let plane = s.plane_len();
    let mut out = Vec::with_capacity(s.n() * plane);
    for b in 0..s.n() {
        let img = logits.image(b);
        out.extend((0..plane).map(|p| if img[plane + p] > img[p] { T::one() } else { T::zero() }));
    }
    Tensor::from_parts(Shape::new(s.n(), 1, s.h(), s.w()), out)
}

fn pixel_agreement<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>) -> (usize, usize) {
    let mask = argmax_mask(logits);
    let correct = mask.data().iter().zip(target.data()).filter(|(a, b)| a == b).count();
    (correct, mask.len())
}
