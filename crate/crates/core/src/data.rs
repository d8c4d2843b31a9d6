//! Shared domain types: the sample unit, token batches, patch weights,
//! volumetric heatmaps and attention stacks, plus their validation rules.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which distribution a sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
    Unconstrained,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
            Domain::Unconstrained => write!(f, "unconstrained"),
        }
    }
}

/// The unit flowing through every stage: an RGB image with optional
/// foreground mask and optional 3D keypoints.
///
/// Pixels and mask values live in [0,1]; keypoints are millimeters.
#[derive(Clone, Debug)]
pub struct ImageSample {
    /// H x W x 3, values in [0,1].
    pub pixels: Array3<f64>,
    /// H x W foreground probability, 1 = foreground.
    pub mask: Option<Array2<f64>>,
    /// K x 3 keypoints in millimeters.
    pub keypoints: Option<Array2<f64>>,
    pub domain: Domain,
    pub sample_id: String,
    pub rng_seed: u64,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Check every documented invariant; violating instances are rejected
    /// with a typed error.
    pub fn validate(&self, patch_size: usize, joints: Option<usize>) -> Result<()> {
        let (h, w, c) = (self.height(), self.width(), self.pixels.shape()[2]);
        if c != 3 {
            return Err(Error::InvalidShape(format!(
                "sample {}: expected 3 channels, got {c}",
                self.sample_id
            )));
        }
        if h == 0 || w == 0 || h % patch_size != 0 || w % patch_size != 0 {
            return Err(Error::InvalidShape(format!(
                "sample {}: dims {h}x{w} are not positive multiples of patch size {patch_size}",
                self.sample_id
            )));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam(format!(
                "sample {}: pixel values outside [0,1]",
                self.sample_id
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != [h, w] {
                return Err(Error::InvalidShape(format!(
                    "sample {}: mask {:?} does not match image {h}x{w}",
                    self.sample_id,
                    mask.shape()
                )));
            }
            if mask.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidParam(format!(
                    "sample {}: mask values outside [0,1]",
                    self.sample_id
                )));
            }
        }
        if let Some(kp) = &self.keypoints {
            if kp.shape()[1] != 3 {
                return Err(Error::InvalidShape(format!(
                    "sample {}: keypoints must be Kx3",
                    self.sample_id
                )));
            }
            if let Some(k) = joints {
                if kp.shape()[0] != k {
                    return Err(Error::InvalidShape(format!(
                        "sample {}: {} keypoints, configured joint count is {k}",
                        self.sample_id,
                        kp.shape()[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A sequence of token vectors with MAE mask bookkeeping.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    /// M x d token matrix.
    pub tokens: Array2<f64>,
    /// Original patch index of each non-class row, ascending.
    pub index_map: Vec<usize>,
    /// N-length mask, 1 = masked out.
    pub binary_mask: Vec<u8>,
    pub has_cls: bool,
}

impl TokenBatch {
    pub fn validate(&self) -> Result<()> {
        let n = self.binary_mask.len();
        let kept = self.binary_mask.iter().filter(|&&m| m == 0).count();
        let expected = kept + usize::from(self.has_cls);
        if self.tokens.shape()[0] != expected {
            return Err(Error::InvalidShape(format!(
                "token count {} != kept {kept} + cls {}",
                self.tokens.shape()[0],
                usize::from(self.has_cls)
            )));
        }
        if self.index_map.len() != kept {
            return Err(Error::InvalidShape(format!(
                "index_map length {} != kept count {kept}",
                self.index_map.len()
            )));
        }
        let mut seen = vec![false; n];
        for &i in &self.index_map {
            if i >= n || seen[i] {
                return Err(Error::InvalidShape(format!(
                    "index_map entry {i} out of range or duplicated"
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// Per-patch reconstruction weights (ratios plus their normalized transform).
#[derive(Clone, Debug)]
pub struct PatchWeights {
    /// Raw foreground ratios in [0,1].
    pub ratios: Vec<f64>,
    /// Normalized weights, sum = N.
    pub weights: Vec<f64>,
    pub alpha: f64,
}

impl PatchWeights {
    pub fn uniform(n: usize) -> Self {
        PatchWeights {
            ratios: vec![0.5; n],
            weights: vec![1.0; n],
            alpha: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.weights.len();
        if n == 0 || self.ratios.len() != n {
            return Err(Error::InvalidShape("empty or mismatched weight vectors".into()));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(Error::InvalidParam("weights must be strictly positive".into()));
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - n as f64).abs() > 1e-6 * n as f64 {
            return Err(Error::InvalidParam(format!(
                "weights sum {sum} differs from N = {n}"
            )));
        }
        Ok(())
    }
}

/// The metric cube a heatmap volume lives in.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    /// Center in millimeters.
    pub center: [f64; 3],
    /// Side length in millimeters.
    pub side: f64,
}

impl Cube {
    /// Root-relative cube: centered at the origin.
    pub fn root_relative(side: f64) -> Self {
        Cube {
            center: [0.0; 3],
            side,
        }
    }
}

/// K x D x H x W volumetric keypoint likelihoods plus the voxel-metric map.
#[derive(Clone, Debug)]
pub struct Heatmap3D {
    /// Axes: joint, depth, y, x.
    pub volume: Array4<f64>,
    pub cube: Cube,
    /// Gaussian std in voxels.
    pub sigma: f64,
}

impl Heatmap3D {
    /// Voxels per side (cube volumes here are always S x S x S).
    pub fn voxels_per_side(&self) -> usize {
        self.volume.shape()[1]
    }

    /// Metric size of one voxel in millimeters.
    pub fn voxel_size_mm(&self) -> f64 {
        self.cube.side / self.voxels_per_side() as f64
    }

    pub fn validate(&self, grid_side: Option<usize>) -> Result<()> {
        let s = self.volume.shape();
        if s[1] != s[2] || s[2] != s[3] {
            return Err(Error::InvalidShape(format!(
                "heatmap volume must be cubic, got {s:?}"
            )));
        }
        if let Some(g) = grid_side {
            if s[1] != 4 * g {
                return Err(Error::InvalidShape(format!(
                    "voxel side {} != 4*sqrt(N) = {}",
                    s[1],
                    4 * g
                )));
            }
        }
        if self.volume.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParam("heatmap voxels must be >= 0".into()));
        }
        if self.cube.side <= 0.0 {
            return Err(Error::InvalidCube("cube side must be > 0".into()));
        }
        Ok(())
    }
}

/// Per-block class-token attention rows over the patch tokens, class position
/// excluded. Shape L x N.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub rows: Array2<f64>,
}

impl AttentionStack {
    pub fn blocks(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn patches(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn validate(&self, expected_blocks: Option<usize>) -> Result<()> {
        if let Some(l) = expected_blocks {
            if self.blocks() != l {
                return Err(Error::InvalidShape(format!(
                    "attention stack has {} rows, encoder has {l} blocks",
                    self.blocks()
                )));
            }
        }
        for row in self.rows.rows() {
            let sum: f64 = row.sum();
            // Softmax row minus the excluded class-to-class entry.
            if !(sum > 0.0 && sum <= 1.0 + 1e-9) {
                return Err(Error::InvalidParam(format!(
                    "attention row sum {sum} outside (0,1]"
                )));
            }
            if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidParam("attention entries outside [0,1]".into()));
            }
        }
        Ok(())
    }
}
