//! Exudate segmentation in retinal fundus images with a residual
//! encoder-decoder network.
//!
//! The crate is self-contained: tensors and the convolution, pooling and
//! loss kernels (with their backward passes) are implemented here, on top
//! of a plain GEMM.

pub mod augment;
pub mod config;
pub mod datasets;
pub mod error;
pub mod gradcheck;
pub mod manifest;
pub mod metrics;
pub mod net;
pub mod ops;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use datasets::{DatasetKind, FundusSample, SplitPlan};
pub use error::{Error, Result};
pub use manifest::{Command, RunManifest, RunRequest};
pub use metrics::{ConfusionCounts, Report, ScreeningVerdict};
pub use net::{load_weights, save_weights, Mode, Model, NetworkConfig, UpsampleMode};
pub use ops::ConvSpec;
pub use pipeline::{execute, replay};
pub use tensor::{DType, Scalar, Shape, Tensor};
pub use train::{train, TrainConfig, TrainHistory};
