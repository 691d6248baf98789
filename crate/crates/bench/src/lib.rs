//! Fixtures shared by the benchmarks.

use rtcnet::gradcheck::uniform_tensor;
use rtcnet::{ConvSpec, Model, NetworkConfig, Shape, Tensor};

/// Uniform `[-1, 1)` values in single precision.
pub fn random(shape: Shape, seed: u64) -> Tensor<f32> {
    uniform_tensor(shape, seed, -1.0, 1.0).cast()
}

/// A `k x k` convolution from `cin` to `cout` channels with "same" padding.
pub fn conv_spec(cin: usize, cout: usize, k: usize, seed: u64) -> ConvSpec<f32> {
    let kernel = random(Shape::new(cout, cin, k, k), seed);
    ConvSpec::new(kernel, vec![0.01; cout], 1, k / 2).expect("positive stride")
}

/// The 4x4 stride-2 upsampling layer, kernel laid out `(cin, cout, 4, 4)`.
pub fn upsample_spec(cin: usize, cout: usize, seed: u64) -> ConvSpec<f32> {
    let kernel = random(Shape::new(cin, cout, 4, 4), seed);
    ConvSpec::new(kernel, vec![0.0; cout], 2, 1).expect("positive stride")
}

/// The reduced network on `size x size` inputs.
pub fn reduced_model(size: usize) -> Model<f32> {
    Model::build(NetworkConfig::reduced(size, size, [8, 16, 32, 64], [32, 16, 8, 8]), 0).expect("valid config")
}

/// Random binary mask `(n, 1, h, w)`.
pub fn random_mask(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
    let u = random(Shape::new(n, 1, h, w), seed);
    Tensor::from_fn(u.shape(), |i| if u.get(i) > 0.6 { 1.0 } else { 0.0 })
}
