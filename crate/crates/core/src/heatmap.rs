//! Gaussian-blob heatmap targets and heatmap-to-keypoint decoding.
//!
//! Continuous voxel coordinates: `v = (y - cube.center + side/2) / side * S`
//! with `S` voxels per side, so the cube center maps to `S/2` and voxel `z`
//! (integer index) decodes to the metric point with `v = z`.

use ndarray::{Array2, Array4};

use crate::data::{Cube, Heatmap3D};
use crate::error::{Error, Result};

/// Continuous voxel coordinates of one metric point.
fn to_voxel(y: [f64; 3], cube: &Cube, voxels: usize) -> [f64; 3] {
    let s = voxels as f64;
    [
        (y[0] - cube.center[0] + cube.side / 2.0) / cube.side * s,
        (y[1] - cube.center[1] + cube.side / 2.0) / cube.side * s,
        (y[2] - cube.center[2] + cube.side / 2.0) / cube.side * s,
    ]
}

/// Inverse of [`to_voxel`].
fn to_metric(v: [f64; 3], cube: &Cube, voxels: usize) -> [f64; 3] {
    let s = voxels as f64;
    [
        v[0] / s * cube.side - cube.side / 2.0 + cube.center[0],
        v[1] / s * cube.side - cube.side / 2.0 + cube.center[1],
        v[2] / s * cube.side - cube.side / 2.0 + cube.center[2],
    ]
}

/// Encode keypoints (K x 3 mm) as isotropic Gaussian blobs in a cubic volume
/// of `voxels` per side. Joints outside the cube are clamped to the voxel
/// grid boundary and flagged.
pub fn keypoints_to_heatmaps(
    keypoints: &Array2<f64>,
    cube: Cube,
    sigma: f64,
    voxels: usize,
) -> Result<(Heatmap3D, Vec<bool>)> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParam(format!("sigma {sigma} must be > 0")));
    }
    if cube.side <= 0.0 {
        return Err(Error::InvalidCube("cube side must be > 0".into()));
    }
    if keypoints.shape()[1] != 3 {
        return Err(Error::InvalidShape("keypoints must be Kx3".into()));
    }
    let k = keypoints.shape()[0];
    let mut volume = Array4::zeros((k, voxels, voxels, voxels));
    let mut clamped = vec![false; k];
    let inv = 1.0 / (2.0 * sigma * sigma);
    let max_coord = (voxels - 1) as f64;

    // The blob is separable: precompute per-axis factors and take the
    // outer product instead of evaluating exp at every voxel.
    let mut fx = vec![0.0; voxels];
    let mut fy = vec![0.0; voxels];
    let mut fz = vec![0.0; voxels];
    for (joint, row) in keypoints.rows().into_iter().enumerate() {
        let raw = to_voxel([row[0], row[1], row[2]], &cube, voxels);
        let mut v = raw;
        for a in 0..3 {
            if v[a] < 0.0 || v[a] > max_coord {
                v[a] = v[a].clamp(0.0, max_coord);
                clamped[joint] = true;
            }
        }
        for i in 0..voxels {
            let d = i as f64;
            fx[i] = (-(d - v[0]) * (d - v[0]) * inv).exp();
            fy[i] = (-(d - v[1]) * (d - v[1]) * inv).exp();
            fz[i] = (-(d - v[2]) * (d - v[2]) * inv).exp();
        }
        for z in 0..voxels {
            let gz = fz[z];
            for y in 0..voxels {
                let gzy = gz * fy[y];
                for x in 0..voxels {
                    volume[[joint, z, y, x]] = gzy * fx[x];
                }
            }
        }
    }
    Ok((
        Heatmap3D {
            volume,
            cube,
            sigma,
        },
        clamped,
    ))
}

/// Decoded keypoints with per-joint degeneracy flags.
#[derive(Clone, Debug)]
pub struct DecodedKeypoints {
    /// K x 3 millimeters.
    pub keypoints: Array2<f64>,
    /// True if a joint's channel was constant (decoded to the cube center).
    pub degenerate: Vec<bool>,
}

/// One-dimensional quadratic peak refinement from the three samples around
/// the argmax. Returns an offset in (-0.5, 0.5).
fn quadratic_offset(left: f64, center: f64, right: f64) -> f64 {
    let denom = left - 2.0 * center + right;
    if denom.abs() < 1e-300 {
        return 0.0;
    }
    let off = 0.5 * (left - right) / denom;
    off.clamp(-0.5, 0.5)
}

/// Decode per-joint metric keypoints: argmax voxel plus quadratic sub-voxel
/// refinement along each axis, then the inverse cube mapping. Ties break
/// toward the smallest linear voxel index; constant channels decode to the
/// cube center and are flagged.
pub fn heatmaps_to_keypoints(heatmap: &Heatmap3D) -> Result<DecodedKeypoints> {
    let shape = heatmap.volume.shape();
    let (k, s) = (shape[0], shape[1]);
    if k == 0 || s == 0 {
        return Err(Error::InvalidShape("empty heatmap volume".into()));
    }
    let mut keypoints = Array2::zeros((k, 3));
    let mut degenerate = vec![false; k];
    for joint in 0..k {
        let channel = heatmap.volume.index_axis(ndarray::Axis(0), joint);
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = (0usize, 0usize, 0usize);
        let mut all_equal = true;
        let first = channel[[0, 0, 0]];
        for z in 0..s {
            for y in 0..s {
                for x in 0..s {
                    let v = channel[[z, y, x]];
                    if v != first {
                        all_equal = false;
                    }
                    if v > best {
                        best = v;
                        best_idx = (z, y, x);
                    }
                }
            }
        }
        if all_equal {
            degenerate[joint] = true;
            let c = heatmap.cube.center;
            keypoints[[joint, 0]] = c[0];
            keypoints[[joint, 1]] = c[1];
            keypoints[[joint, 2]] = c[2];
            continue;
        }
        let (z, y, x) = best_idx;
        let refine = |idx: usize, get: &dyn Fn(usize) -> f64| -> f64 {
            if idx == 0 || idx == s - 1 {
                idx as f64
            } else {
                idx as f64 + quadratic_offset(get(idx - 1), get(idx), get(idx + 1))
            }
        };
        let vz = refine(z, &|i| channel[[i, y, x]]);
        let vy = refine(y, &|i| channel[[z, i, x]]);
        let vx = refine(x, &|i| channel[[z, y, i]]);
        // Volume axes are (z, y, x); metric axes are (x, y, z).
        let m = to_metric([vx, vy, vz], &heatmap.cube, s);
        keypoints[[joint, 0]] = m[0];
        keypoints[[joint, 1]] = m[1];
        keypoints[[joint, 2]] = m[2];
    }
    Ok(DecodedKeypoints {
        keypoints,
        degenerate,
    })
}

/// Convert absolute keypoints to the root-relative frame the heatmaps use.
pub fn root_relative(keypoints: &Array2<f64>, root: usize) -> Array2<f64> {
    let mut out = keypoints.clone();
    let r = [keypoints[[root, 0]], keypoints[[root, 1]], keypoints[[root, 2]]];
    for mut row in out.rows_mut() {
        row[0] -= r[0];
        row[1] -= r[1];
        row[2] -= r[2];
    }
    out
}
