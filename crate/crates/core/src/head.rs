//! The volumetric keypoint head: two stride-2 transposed convolutions (each
//! followed by rectification and batch normalization) and a 1x1 convolution
//! whose channels reshape to K volumetric heatmaps of side 4*sqrt(N).

use ndarray::{Array1, Array2, Array4};

use crate::error::{Error, Result};
use crate::nn::conv::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, relu, relu_backward, BatchNorm,
    BatchNormCache,
};
use crate::nn::{ParamKind, ParamMut, ParamRef, ParamSet};
use crate::seeds::{normal, Stream};

#[derive(Clone, Debug)]
pub struct KeypointHead {
    pub deconv1_k: Array4<f64>,
    pub deconv1_b: Array1<f64>,
    pub bn1: BatchNorm,
    pub deconv2_k: Array4<f64>,
    pub deconv2_b: Array1<f64>,
    pub bn2: BatchNorm,
    pub conv_k: Array4<f64>,
    pub conv_b: Array1<f64>,
    pub joints: usize,
    /// Heatmap voxels per side (= 4 * sqrt(N)).
    pub voxels: usize,
}

fn he_kernel(shape: (usize, usize, usize, usize), rng: &mut Stream) -> Array4<f64> {
    let fan_in = (shape.0 * shape.1 * shape.2) as f64;
    let std = (2.0 / fan_in).sqrt();
    Array4::from_shape_fn(shape, |_| normal(rng) * std)
}

impl KeypointHead {
    pub fn init(embed_dim: usize, grid_side: usize, joints: usize, channels: (usize, usize), rng: &mut Stream) -> Self {
        let voxels = 4 * grid_side;
        let (c1, c2) = channels;
        KeypointHead {
            deconv1_k: he_kernel((4, 4, embed_dim, c1), rng),
            deconv1_b: Array1::zeros(c1),
            bn1: BatchNorm::new(c1),
            deconv2_k: he_kernel((4, 4, c1, c2), rng),
            deconv2_b: Array1::zeros(c2),
            bn2: BatchNorm::new(c2),
            // Small prediction weights start the volumes near the zero
            // baseline instead of unit-scale noise.
            conv_k: Array4::from_shape_fn((1, 1, c2, voxels * joints), |_| normal(rng) * 0.01),
            conv_b: Array1::zeros(voxels * joints),
            joints,
            voxels,
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.deconv1_k.fill(0.0);
        out.deconv1_b.fill(0.0);
        out.bn1.gamma.fill(0.0);
        out.bn1.beta.fill(0.0);
        out.bn1.running_mean.fill(0.0);
        out.bn1.running_var.fill(0.0);
        out.deconv2_k.fill(0.0);
        out.deconv2_b.fill(0.0);
        out.bn2.gamma.fill(0.0);
        out.bn2.beta.fill(0.0);
        out.bn2.running_mean.fill(0.0);
        out.bn2.running_var.fill(0.0);
        out.conv_k.fill(0.0);
        out.conv_b.fill(0.0);
        out
    }
}

impl ParamSet for KeypointHead {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        use ParamKind::*;
        vec![
            ParamRef { name: "head.deconv1_k".into(), view: self.deconv1_k.view().into_dyn(), kind: Decay },
            ParamRef { name: "head.deconv1_b".into(), view: self.deconv1_b.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn1_gamma".into(), view: self.bn1.gamma.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn1_beta".into(), view: self.bn1.beta.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn1_mean".into(), view: self.bn1.running_mean.view().into_dyn(), kind: State },
            ParamRef { name: "head.bn1_var".into(), view: self.bn1.running_var.view().into_dyn(), kind: State },
            ParamRef { name: "head.deconv2_k".into(), view: self.deconv2_k.view().into_dyn(), kind: Decay },
            ParamRef { name: "head.deconv2_b".into(), view: self.deconv2_b.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn2_gamma".into(), view: self.bn2.gamma.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn2_beta".into(), view: self.bn2.beta.view().into_dyn(), kind: NoDecay },
            ParamRef { name: "head.bn2_mean".into(), view: self.bn2.running_mean.view().into_dyn(), kind: State },
            ParamRef { name: "head.bn2_var".into(), view: self.bn2.running_var.view().into_dyn(), kind: State },
            ParamRef { name: "head.conv_k".into(), view: self.conv_k.view().into_dyn(), kind: Decay },
            ParamRef { name: "head.conv_b".into(), view: self.conv_b.view().into_dyn(), kind: NoDecay },
        ]
    }

    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        use ParamKind::*;
        vec![
            ParamMut { name: "head.deconv1_k".into(), view: self.deconv1_k.view_mut().into_dyn(), kind: Decay },
            ParamMut { name: "head.deconv1_b".into(), view: self.deconv1_b.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn1_gamma".into(), view: self.bn1.gamma.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn1_beta".into(), view: self.bn1.beta.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn1_mean".into(), view: self.bn1.running_mean.view_mut().into_dyn(), kind: State },
            ParamMut { name: "head.bn1_var".into(), view: self.bn1.running_var.view_mut().into_dyn(), kind: State },
            ParamMut { name: "head.deconv2_k".into(), view: self.deconv2_k.view_mut().into_dyn(), kind: Decay },
            ParamMut { name: "head.deconv2_b".into(), view: self.deconv2_b.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn2_gamma".into(), view: self.bn2.gamma.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn2_beta".into(), view: self.bn2.beta.view_mut().into_dyn(), kind: NoDecay },
            ParamMut { name: "head.bn2_mean".into(), view: self.bn2.running_mean.view_mut().into_dyn(), kind: State },
            ParamMut { name: "head.bn2_var".into(), view: self.bn2.running_var.view_mut().into_dyn(), kind: State },
            ParamMut { name: "head.conv_k".into(), view: self.conv_k.view_mut().into_dyn(), kind: Decay },
            ParamMut { name: "head.conv_b".into(), view: self.conv_b.view_mut().into_dyn(), kind: NoDecay },
        ]
    }
}

pub struct HeadCache {
    input: Array4<f64>,
    z1: Array4<f64>,
    r1: Array4<f64>,
    bn1: BatchNormCache,
    y1: Array4<f64>,
    z2: Array4<f64>,
    r2: Array4<f64>,
    bn2: BatchNormCache,
    y2: Array4<f64>,
}

/// Arrange a batch of token matrices (N x d, class token already removed)
/// into the spatial grid (B, sqrt(N), sqrt(N), d).
pub fn tokens_to_grid(batch: &[Array2<f64>]) -> Result<Array4<f64>> {
    if batch.is_empty() {
        return Err(Error::InvalidShape("empty batch".into()));
    }
    let n = batch[0].shape()[0];
    let d = batch[0].shape()[1];
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return Err(Error::InvalidShape(format!(
            "token count {n} is not a perfect square"
        )));
    }
    let mut grid = Array4::zeros((batch.len(), side, side, d));
    for (b, tokens) in batch.iter().enumerate() {
        if tokens.shape() != [n, d] {
            return Err(Error::InvalidShape("ragged batch".into()));
        }
        for i in 0..n {
            let (r, c) = (i / side, i % side);
            for j in 0..d {
                grid[[b, r, c, j]] = tokens[[i, j]];
            }
        }
    }
    Ok(grid)
}

/// Inverse of [`tokens_to_grid`] for gradients.
fn grid_to_tokens(grid: &Array4<f64>) -> Vec<Array2<f64>> {
    let (b, side, _, d) = {
        let s = grid.shape();
        (s[0], s[1], s[2], s[3])
    };
    (0..b)
        .map(|bi| {
            let mut t = Array2::zeros((side * side, d));
            for r in 0..side {
                for c in 0..side {
                    for j in 0..d {
                        t[[r * side + c, j]] = grid[[bi, r, c, j]];
                    }
                }
            }
            t
        })
        .collect()
}

fn conv_out_to_volumes(out: &Array4<f64>, joints: usize, voxels: usize) -> Vec<Array4<f64>> {
    let b = out.shape()[0];
    let s = voxels;
    (0..b)
        .map(|bi| {
            let mut vol = Array4::zeros((joints, s, s, s));
            for y in 0..s {
                for x in 0..s {
                    for k in 0..joints {
                        for dz in 0..s {
                            vol[[k, dz, y, x]] = out[[bi, y, x, k * s + dz]];
                        }
                    }
                }
            }
            vol
        })
        .collect()
}

fn volumes_to_conv_grad(d_vols: &[Array4<f64>], joints: usize, voxels: usize) -> Array4<f64> {
    let b = d_vols.len();
    let s = voxels;
    let mut out = Array4::zeros((b, s, s, joints * s));
    for (bi, vol) in d_vols.iter().enumerate() {
        for y in 0..s {
            for x in 0..s {
                for k in 0..joints {
                    for dz in 0..s {
                        out[[bi, y, x, k * s + dz]] = vol[[k, dz, y, x]];
                    }
                }
            }
        }
    }
    out
}

impl KeypointHead {
    /// Training-mode forward over a batch of token grids. Returns one
    /// K x S x S x S volume per sample plus the backward cache.
    pub fn forward_train(&mut self, batch: &[Array2<f64>]) -> Result<(Vec<Array4<f64>>, HeadCache)> {
        let input = tokens_to_grid(batch)?;
        self.check_width(&input)?;
        let z1 = deconv2d(&input, &self.deconv1_k, &self.deconv1_b, 1);
        let r1 = relu(&z1);
        let (y1, bn1) = self.bn1.forward_train(&r1);
        let z2 = deconv2d(&y1, &self.deconv2_k, &self.deconv2_b, 1);
        let r2 = relu(&z2);
        let (y2, bn2) = self.bn2.forward_train(&r2);
        let out = conv2d(&y2, &self.conv_k, &self.conv_b, 0);
        let volumes = conv_out_to_volumes(&out, self.joints, self.voxels);
        Ok((
            volumes,
            HeadCache {
                input,
                z1,
                r1,
                bn1,
                y1,
                z2,
                r2,
                bn2,
                y2,
            },
        ))
    }

    /// Evaluation-mode forward with running batch-norm statistics;
    /// deterministic and independent of batch composition.
    pub fn forward_eval(&self, batch: &[Array2<f64>]) -> Result<Vec<Array4<f64>>> {
        let input = tokens_to_grid(batch)?;
        self.check_width(&input)?;
        let z1 = deconv2d(&input, &self.deconv1_k, &self.deconv1_b, 1);
        let y1 = self.bn1.forward_eval(&relu(&z1));
        let z2 = deconv2d(&y1, &self.deconv2_k, &self.deconv2_b, 1);
        let y2 = self.bn2.forward_eval(&relu(&z2));
        let out = conv2d(&y2, &self.conv_k, &self.conv_b, 0);
        Ok(conv_out_to_volumes(&out, self.joints, self.voxels))
    }

    fn check_width(&self, input: &Array4<f64>) -> Result<()> {
        let d = input.shape()[3];
        if d != self.deconv1_k.shape()[2] {
            return Err(Error::InvalidShape(format!(
                "token width {d} does not match head input width {}",
                self.deconv1_k.shape()[2]
            )));
        }
        let side = input.shape()[1];
        if 4 * side != self.voxels {
            return Err(Error::InvalidShape(format!(
                "grid side {side} does not match head output {} voxels",
                self.voxels
            )));
        }
        Ok(())
    }

    /// Backward from per-sample volume gradients. Returns parameter
    /// gradients and the per-sample gradients on the input token matrices.
    pub fn backward(&self, cache: &HeadCache, d_volumes: &[Array4<f64>]) -> (KeypointHead, Vec<Array2<f64>>) {
        let mut grads = self.zeros_like();
        let d_out = volumes_to_conv_grad(d_volumes, self.joints, self.voxels);
        let (d_y2, d_conv_k, d_conv_b) = conv2d_backward(&cache.y2, &self.conv_k, &d_out, 0);
        grads.conv_k = d_conv_k;
        grads.conv_b = d_conv_b;

        let (d_r2, d_g2, d_b2) = self.bn2.backward(&cache.bn2, &d_y2);
        grads.bn2.gamma = d_g2;
        grads.bn2.beta = d_b2;
        let d_z2 = relu_backward(&cache.z2, &d_r2);
        let _ = &cache.r2;
        let (d_y1, d_k2, d_db2) = deconv2d_backward(&cache.y1, &self.deconv2_k, &d_z2, 1);
        grads.deconv2_k = d_k2;
        grads.deconv2_b = d_db2;

        let (d_r1, d_g1, d_b1) = self.bn1.backward(&cache.bn1, &d_y1);
        grads.bn1.gamma = d_g1;
        grads.bn1.beta = d_b1;
        let d_z1 = relu_backward(&cache.z1, &d_r1);
        let _ = &cache.r1;
        let (d_input, d_k1, d_db1) = deconv2d_backward(&cache.input, &self.deconv1_k, &d_z1, 1);
        grads.deconv1_k = d_k1;
        grads.deconv1_b = d_db1;

        (grads, grid_to_tokens(&d_input))
    }
}
