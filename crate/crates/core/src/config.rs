//! Model and training configuration.
//!
//! `ModelConfig` mirrors the documented config-file keys one to one; the CLI
//! merges file values over profile defaults and flag overrides over both, then
//! echoes the resolved config into the run directory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Where target-domain masks come from during pre-training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMaskSource {
    /// Predicted by the segmentation network trained on source.
    Learned,
    /// Ground-truth masks from the dataset (upper bound / debugging).
    Oracle,
    /// No target masks: uniform weights, no background swap on target.
    None,
}

/// Ablation switches. All default to the full method.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AblationConfig {
    /// Foreground-centric reconstruction weighting. Off = uniform weights.
    pub fcr: bool,
    /// Attention regularization during fine-tuning. Off = lambda treated as 0.
    pub ar: bool,
    /// Source of target-domain masks.
    pub target_masks: TargetMaskSource,
    /// Background-swap augmentation with the unconstrained set.
    pub bg_aug: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            fcr: true,
            ar: true,
            target_masks: TargetMaskSource::Learned,
            bg_aug: true,
        }
    }
}

/// How the two fine-tuning objectives are applied each iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Separate optimizer steps: heatmap loss on a source batch, then the
    /// attention term on a target batch.
    Alternating,
    /// One combined step on the summed objective.
    Combined,
}

/// One optimizer/schedule block (pre-training, fine-tuning or segmenter).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub min_lr: f64,
    /// Fraction of `steps` spent in linear warmup.
    pub warmup_frac: f64,
    pub weight_decay: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SegmenterConfig {
    /// Number of resolutions in the U-shaped network.
    pub levels: usize,
    pub channels: usize,
    pub stage: StageConfig,
    /// Fraction of source training data held out for model selection.
    pub val_frac: f64,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation_deg: f64,
    pub translate_frac: f64,
    pub scale_lo: f64,
    pub scale_hi: f64,
    /// Brightness/contrast jitter strength in [0,1).
    pub jitter: f64,
    /// Probability of swapping the background with an unconstrained image
    /// during pre-training.
    pub bg_swap_prob: f64,
}

/// Everything the models and training loops need to know. Immutable once a
/// run starts; the resolved value is serialized into the run directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Square input resolution in pixels.
    pub image_size: usize,
    /// Patch side in pixels.
    pub patch_size: usize,
    /// Encoder width.
    pub embed_dim: usize,
    /// Decoder width.
    pub decoder_dim: usize,
    pub encoder_blocks: usize,
    /// The reconstruction decoder is a single block.
    pub decoder_blocks: usize,
    pub heads: usize,
    /// Head count of the reconstruction decoder (its width differs).
    pub decoder_heads: usize,
    /// FFN hidden width as a multiple of the block width.
    pub ffn_ratio: usize,
    /// Masking ratio r in [0,1).
    pub mask_ratio: f64,
    /// Foreground-weighting sharpness.
    pub alpha: f64,
    /// Weight of the attention term in the combined fine-tuning loss.
    pub lambda_attn: f64,
    /// Number of keypoints K.
    pub joints: usize,
    /// Index of the root joint (heatmaps are root-relative).
    pub root_joint: usize,
    /// Gaussian blob std in voxels.
    pub sigma_voxels: f64,
    /// Metric side of the heatmap cube, millimeters.
    pub cube_side_mm: f64,
    /// Channel widths of the two upsampling stages of the keypoint head.
    pub head_channels: (usize, usize),
    /// Divide the heatmap loss by the voxel count (default off: literal sum).
    pub normalize_kpt_loss: bool,
    /// Report EPE after root alignment (sensitivity flag; default off).
    pub epe_root_align: bool,

    pub ablation: AblationConfig,
    pub pretrain: StageConfig,
    pub finetune: StageConfig,
    pub finetune_mode: FinetuneMode,
    /// Target batches drawn per source batch during fine-tuning.
    pub target_ratio: usize,
    pub segmenter: SegmenterConfig,
    pub augment: AugmentConfig,
    /// Orthographic projection scale, pixels per millimeter.
    pub px_per_mm: f64,
}

impl ModelConfig {
    /// Desk-scale profile exercised by the test suites.
    pub fn toy() -> Self {
        ModelConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            decoder_dim: 32,
            encoder_blocks: 4,
            decoder_blocks: 1,
            heads: 4,
            decoder_heads: 4,
            ffn_ratio: 4,
            mask_ratio: 0.75,
            alpha: 4.0,
            lambda_attn: 1.0,
            joints: 8,
            root_joint: 0,
            sigma_voxels: 2.0,
            cube_side_mm: 440.0,
            head_channels: (16, 16),
            normalize_kpt_loss: true,
            epe_root_align: false,
            ablation: AblationConfig::default(),
            pretrain: StageConfig {
                steps: 400,
                batch_size: 16,
                base_lr: 2.4e-3,
                min_lr: 0.0,
                warmup_frac: 0.1,
                weight_decay: 0.05,
            },
            finetune: StageConfig {
                steps: 400,
                batch_size: 16,
                base_lr: 5e-4,
                min_lr: 0.0,
                warmup_frac: 0.1,
                weight_decay: 0.05,
            },
            finetune_mode: FinetuneMode::Alternating,
            target_ratio: 1,
            segmenter: SegmenterConfig {
                levels: 3,
                channels: 16,
                stage: StageConfig {
                    steps: 300,
                    batch_size: 12,
                    base_lr: 1.5e-3,
                    min_lr: 0.0,
                    warmup_frac: 0.05,
                    weight_decay: 0.0,
                },
                val_frac: 0.1,
            },
            augment: AugmentConfig {
                rotation_deg: 15.0,
                translate_frac: 0.08,
                scale_lo: 0.9,
                scale_hi: 1.1,
                jitter: 0.1,
                bg_swap_prob: 0.5,
            },
            px_per_mm: 0.15,
        }
    }

    /// Full-scale profile. Shape-compatible with the published architecture;
    /// expressible but far beyond desk-scale budgets.
    pub fn paper() -> Self {
        let mut cfg = Self::toy();
        cfg.image_size = 256;
        cfg.patch_size = 16;
        cfg.embed_dim = 768;
        cfg.decoder_dim = 512;
        cfg.encoder_blocks = 12;
        cfg.heads = 12;
        cfg.decoder_heads = 16;
        cfg.lambda_attn = 100.0;
        cfg.head_channels = (256, 256);
        cfg.normalize_kpt_loss = false;
        cfg.px_per_mm = 0.6;
        cfg.pretrain = StageConfig {
            steps: 100_000,
            batch_size: 4096,
            base_lr: 2.4e-3,
            min_lr: 0.0,
            warmup_frac: 0.05,
            weight_decay: 0.05,
        };
        cfg.finetune = StageConfig {
            steps: 20_000,
            batch_size: 128,
            base_lr: 5e-4,
            min_lr: 0.0,
            warmup_frac: 0.05,
            weight_decay: 0.05,
        };
        cfg
    }

    /// Tiny 64-bit configuration used by the gradient-check suite.
    pub fn gradcheck() -> Self {
        let mut cfg = Self::toy();
        cfg.image_size = 32;
        cfg.patch_size = 8; // N = 16
        cfg.embed_dim = 16;
        cfg.decoder_dim = 16;
        cfg.encoder_blocks = 2;
        cfg.heads = 2;
        cfg.joints = 4;
        cfg.head_channels = (8, 8);
        cfg
    }

    /// Patch-grid side (`image_size / patch_size`).
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Heatmap cube side in voxels (4 * sqrt(N)).
    pub fn heatmap_voxels(&self) -> usize {
        4 * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidParam(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::InvalidParam(format!(
                "mask_ratio {} outside [0,1)",
                self.mask_ratio
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidParam(format!(
                "heads {} must divide embed_dim {}",
                self.heads, self.embed_dim
            )));
        }
        if self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::InvalidParam(format!(
                "decoder_heads {} must divide decoder_dim {}",
                self.decoder_heads, self.decoder_dim
            )));
        }
        if self.decoder_blocks != 1 {
            return Err(Error::InvalidParam(
                "the reconstruction decoder is a single block".into(),
            ));
        }
        if self.lambda_attn < 0.0 {
            return Err(Error::InvalidParam("lambda_attn must be >= 0".into()));
        }
        if self.root_joint >= self.joints {
            return Err(Error::InvalidParam(format!(
                "root_joint {} out of range for {} joints",
                self.root_joint, self.joints
            )));
        }
        if self.sigma_voxels <= 0.0 {
            return Err(Error::InvalidParam("sigma_voxels must be > 0".into()));
        }
        if self.cube_side_mm <= 0.0 {
            return Err(Error::InvalidParam("cube_side_mm must be > 0".into()));
        }
        Ok(())
    }

    /// Masked patch count for this configuration: round(r * N).
    pub fn masked_count(&self) -> usize {
        (self.mask_ratio * self.num_patches() as f64).round() as usize
    }
}
