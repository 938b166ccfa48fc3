//! Copy-move forgery detection on a desk-scale budget.
//!
//! The pipeline runs a small convolutional backbone, scores every pair of
//! feature cells with self-correlation, distills the correlation volume into
//! source/target prototypes, mines channel-wise inconsistencies between the
//! two, and decodes a three-class mask (background, copied source region,
//! pasted tampered region). Everything differentiable runs on a Wengert tape
//! so gradients can be checked against finite differences in 64-bit mode.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inconsistency;
pub mod kernels;
pub mod model;
pub mod params;
pub mod prototypes;
pub mod refine;
pub mod scalar;
pub mod selfcorr;
pub mod synth;
pub mod tape;
pub mod train;
pub mod tensor;

pub use config::{AblationMode, BackboneConfig, OptimizerKind, PlaneMode, RunConfig};
pub use error::{Error, Result};
pub use eval::{ImageScores, PositiveClass, Report, Scores};
pub use model::{param_layout, Model};
pub use params::ParamSet;
pub use refine::DetectionMask;
pub use scalar::Scalar;
pub use synth::{AttackConfig, ForgerySample, Provenance, SourceShape};
pub use tape::{GradTape, ValueId};
pub use train::{train, TrainEvent, TrainResult};
pub use tensor::{Shape4, Tensor4};
