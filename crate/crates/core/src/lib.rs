//! Two-phase chest X-ray analysis: U-Net infection segmentation with a
//! VGG16-style encoder, a dense-block pneumonia classifier built on the
//! transferred encoder, the prediction workflow, metrics and Grad-CAM.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod explain;
pub mod gradcheck;
pub mod imaging;
mod kernels;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use autodiff::{Activation, RunningStats, Tape, Var};
pub use data::{Dataset, DatasetManifest, Label, Split};
pub use error::{Error, Result};
pub use explain::{grad_cam, overlay_heatmap, Heatmap};
pub use imaging::{AugmentParams, GrayImage, MaskImage};
pub use kernels::bilinear_resample;
pub use metrics::{ConfusionMatrix, MetricReport};
pub use nn::{
    transfer_encoder_weights, Block, BlockKind, ClassifierModel, Forward, Mode, Model, ModelKind,
    ParamCount, ParamGrads, SegmentationModel, WidthConfig,
};
pub use tensor::{DType, Element, Tensor};
