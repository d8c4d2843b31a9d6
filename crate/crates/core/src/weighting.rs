//! Per-patch foreground ratios and the foreground-centric weights derived
//! from them: `w_i = N * exp(alpha*(w*_i - 0.5)) / sum_k exp(alpha*(w*_k - 0.5))`.

use ndarray::ArrayView2;

use crate::data::PatchWeights;
use crate::error::{Error, Result};
use crate::patching::PatchGridSpec;

/// Average-pool the mask over each patch: `w*_i` is the foreground pixel
/// ratio of patch `i`, in the same order as `patchify`.
pub fn patch_foreground_ratio(mask: &ArrayView2<f64>, spec: &PatchGridSpec) -> Result<Vec<f64>> {
    if mask.shape() != [spec.height, spec.width] {
        return Err(Error::InvalidShape(format!(
            "mask {:?} does not match spec {}x{}",
            mask.shape(),
            spec.height,
            spec.width
        )));
    }
    let p = spec.patch_size;
    let area = (p * p) as f64;
    let mut ratios = Vec::with_capacity(spec.num_patches());
    for i in 0..spec.num_patches() {
        let (y0, x0) = spec.patch_origin(i);
        let mut sum = 0.0;
        for dy in 0..p {
            for dx in 0..p {
                sum += mask[[y0 + dy, x0 + dx]];
            }
        }
        ratios.push(sum / area);
    }
    Ok(ratios)
}

/// Exponential reweighting of the ratios, normalized so the weights sum to N.
pub fn patch_weights(ratios: &[f64], alpha: f64) -> Result<PatchWeights> {
    if ratios.is_empty() {
        return Err(Error::InvalidShape("empty ratio vector".into()));
    }
    if !alpha.is_finite() {
        return Err(Error::InvalidParam("alpha must be finite".into()));
    }
    let n = ratios.len() as f64;
    let unnormalized: Vec<f64> = ratios.iter().map(|&r| (alpha * (r - 0.5)).exp()).collect();
    let total: f64 = unnormalized.iter().sum();
    let weights: Vec<f64> = unnormalized.iter().map(|&u| n * u / total).collect();
    Ok(PatchWeights {
        ratios: ratios.to_vec(),
        weights,
        alpha,
    })
}
