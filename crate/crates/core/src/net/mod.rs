//! The residual encoder-decoder network.

mod config;
mod model;
mod weights;

pub use config::{
    BlockPlan, LayerInfo, LayerRole, NetworkConfig, Plan, SegmentPlan, ShapeRow, UpsampleMode, BLOCKS, REDUCTION,
};
pub use model::{argmax_mask, BackwardOutput, ForwardTrace, Gradients, Layer, Mode, Model, ParamGrad};
pub use weights::{load_weights, peek_dtype, save_weights, FORMAT_VERSION, MAGIC};

pub(crate) use config::CONFIG_KEYS;
pub(crate) use weights::{load_with_appendix, save_with_appendix};
