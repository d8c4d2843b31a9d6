//! Training objectives: foreground-weighted masked reconstruction, heatmap
//! regression, attention matching, and their combination.
//!
//! Per-sample values are means over the batch dimension; each `*_grad`
//! returns the gradient of the batch-mean loss with respect to the
//! prediction of one sample in a batch of size `batch`.

use ndarray::{Array2, Array4, ArrayView2};

use crate::data::{AttentionStack, Heatmap3D, PatchWeights};
use crate::error::{Error, Result};

/// Weighted masked reconstruction error for one sample:
/// `(1/N) * sum_i w_i * m_i * ||xhat_i - x_i||^2`.
/// Only patches reconstructed from mask tokens contribute.
pub fn masked_recon_loss(
    recon: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    weights: &PatchWeights,
    binary_mask: &[u8],
) -> Result<f64> {
    let n = binary_mask.len();
    if recon.shape() != target.shape() || recon.shape()[0] != n || weights.weights.len() != n {
        return Err(Error::InvalidShape(format!(
            "recon {:?}, target {:?}, weights {}, mask {n}",
            recon.shape(),
            target.shape(),
            weights.weights.len()
        )));
    }
    let mut total = 0.0;
    for i in 0..n {
        if binary_mask[i] == 0 {
            continue;
        }
        let mut sq = 0.0;
        for (a, b) in recon.row(i).iter().zip(target.row(i).iter()) {
            let d = a - b;
            sq += d * d;
        }
        total += weights.weights[i] * sq;
    }
    Ok(total / n as f64)
}

/// Gradient of the batch-mean [`masked_recon_loss`] w.r.t. one sample's
/// reconstruction.
pub fn masked_recon_grad(
    recon: &ArrayView2<f64>,
    target: &ArrayView2<f64>,
    weights: &PatchWeights,
    binary_mask: &[u8],
    batch: usize,
) -> Array2<f64> {
    let n = binary_mask.len();
    let mut grad = Array2::zeros(recon.raw_dim());
    let scale = 2.0 / (n as f64 * batch as f64);
    for i in 0..n {
        if binary_mask[i] == 0 {
            continue;
        }
        let w = weights.weights[i] * scale;
        for (j, (a, b)) in recon.row(i).iter().zip(target.row(i).iter()).enumerate() {
            grad[[i, j]] = w * (a - b);
        }
    }
    grad
}

/// Squared-error heatmap loss for one sample: the plain voxel sum
/// `||pred - target||^2`, optionally divided by the voxel count.
pub fn heatmap_loss(pred: &Heatmap3D, target: &Heatmap3D, normalize: bool) -> Result<f64> {
    if pred.volume.shape() != target.volume.shape() {
        return Err(Error::InvalidShape(format!(
            "heatmap volumes {:?} vs {:?}",
            pred.volume.shape(),
            target.volume.shape()
        )));
    }
    if pred.cube != target.cube {
        return Err(Error::InvalidCube(format!(
            "{:?} vs {:?}",
            pred.cube, target.cube
        )));
    }
    let mut total = 0.0;
    for (a, b) in pred.volume.iter().zip(target.volume.iter()) {
        let d = a - b;
        total += d * d;
    }
    if normalize {
        total /= pred.volume.len() as f64;
    }
    Ok(total)
}

/// Gradient of the batch-mean [`heatmap_loss`] w.r.t. one sample's volume.
pub fn heatmap_loss_grad(
    pred: &Array4<f64>,
    target: &Array4<f64>,
    normalize: bool,
    batch: usize,
) -> Array4<f64> {
    let mut scale = 2.0 / batch as f64;
    if normalize {
        scale /= pred.len() as f64;
    }
    let mut grad = pred - target;
    grad.mapv_inplace(|v| v * scale);
    grad
}

/// Elementwise L1 distance between two attention stacks for one sample.
/// Gradient flows into the first argument only.
pub fn attention_l1(pred: &AttentionStack, reference: &AttentionStack) -> Result<f64> {
    if pred.rows.shape() != reference.rows.shape() {
        return Err(Error::InvalidShape(format!(
            "attention stacks {:?} vs {:?}",
            pred.rows.shape(),
            reference.rows.shape()
        )));
    }
    Ok(pred
        .rows
        .iter()
        .zip(reference.rows.iter())
        .map(|(a, b)| (a - b).abs())
        .sum())
}

/// Subgradient of the batch-mean [`attention_l1`] w.r.t. the first stack
/// (zero at exact equality).
pub fn attention_l1_grad(
    pred: &AttentionStack,
    reference: &AttentionStack,
    batch: usize,
) -> Array2<f64> {
    let scale = 1.0 / batch as f64;
    let mut grad = Array2::zeros(pred.rows.raw_dim());
    for ((g, &a), &b) in grad
        .iter_mut()
        .zip(pred.rows.iter())
        .zip(reference.rows.iter())
    {
        *g = if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            0.0
        };
    }
    grad
}

/// Linear combination of the two fine-tuning terms.
pub fn pose_loss(heatmap_term: f64, attention_term: f64, lambda_attn: f64) -> Result<f64> {
    if lambda_attn < 0.0 {
        return Err(Error::InvalidParam(format!(
            "lambda_attn {lambda_attn} must be >= 0"
        )));
    }
    Ok(heatmap_term + lambda_attn * attention_term)
}
