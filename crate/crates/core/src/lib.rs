//! Self-supervised optical flow by knowledge distillation.
//!
//! The flow is represented directly as a per-pixel field and optimized with
//! Adam under coarse-to-fine pyramids. Stage 1 fits teacher flows with an
//! occlusion-aware photometric loss; stage 2 trains a student on challenging
//! transformations of the same pair against the teacher's confident
//! predictions. Synthetic scenes with exact ground truth drive the tests.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod flow;
pub mod image;
pub mod io;
pub mod loss;
pub mod engine;
pub mod superpixel;
pub mod synth;
pub mod transform;
pub mod viz;

mod sampling;

pub use error::{Error, Result};
pub use flow::{
    confidence_map, flow_to_disparity, occlusion_from_consistency, reverse_flow, warp_image, Disparity,
    FlowField, MaskMap,
};
pub use image::{image_gradient, soft_census, ssim_map, DescriptorImage, Image};
pub use loss::{LossConfig, LossReport, PhotometricKind, Stage};
pub use engine::{OptimizerConfig, PyramidSpec, StudentVariant, TeacherPrediction, TrainConfig};
pub use synth::{Scene, SceneSpec};
pub use transform::{AffineTransform, ColorTransform, TransformBundle, TransformPolicy};
