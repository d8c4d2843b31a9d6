//! Two-stage domain adaptation for 3D keypoint estimation at desk scale:
//! masked-autoencoder pre-training with foreground-weighted reconstruction,
//! then supervised fine-tuning with an attention-regularization term, plus a
//! synthetic cross-domain dataset generator that makes the whole pipeline
//! verifiable end to end.

pub use ndarray;
pub use rand;

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod head;
pub mod heatmap;
pub mod imgio;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod patching;
pub mod pipeline;
pub mod segmenter;
pub mod seeds;
pub mod runs;
pub mod synth;
pub mod train;
pub mod texture;
pub mod vit;
pub mod weighting;

pub use config::{AblationConfig, FinetuneMode, ModelConfig, StageConfig, TargetMaskSource};
pub use data::{AttentionStack, Cube, Domain, Heatmap3D, ImageSample, PatchWeights, TokenBatch};
pub use error::{Error, Result};
pub use patching::PatchGridSpec;
