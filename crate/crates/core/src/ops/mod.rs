//! Differentiable kernels the network is assembled from.

mod conv;
mod elementwise;
mod loss;
mod pool;

pub use conv::{
    conv2d_backward, conv2d_forward, conv2d_output_shape, transposed_conv2d_backward,
    transposed_conv2d_forward, transposed_conv2d_output_shape, ConvGrads, ConvSpec,
};
pub use elementwise::{add, relu, relu_backward};
pub use loss::{softmax_cross_entropy, LossOutput};
pub use pool::{maxpool2x2, maxpool2x2_backward, maxunpool2x2, maxunpool2x2_backward, PoolIndices};

pub(crate) use elementwise::{add_assign, masked_by_positive};
