//! Image-to-patch conversion and MAE mask bookkeeping.
//!
//! Patch order is row-major over the grid; each patch row is flattened as
//! (row-within-patch, col-within-patch, channel).

use ndarray::{Array2, Array3, ArrayView2};
use rand::seq::SliceRandom;

use crate::data::TokenBatch;
use crate::error::{Error, Result};
use crate::seeds::Stream;

/// Patch-grid geometry. `N = (H/P) * (W/P)` exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGridSpec {
    pub patch_size: usize,
    pub height: usize,
    pub width: usize,
}

impl PatchGridSpec {
    pub fn new(height: usize, width: usize, patch_size: usize) -> Result<Self> {
        if patch_size == 0 || height % patch_size != 0 || width % patch_size != 0 {
            return Err(Error::InvalidShape(format!(
                "image {height}x{width} is not a multiple of patch size {patch_size}"
            )));
        }
        Ok(PatchGridSpec {
            patch_size,
            height,
            width,
        })
    }

    pub fn square(image_size: usize, patch_size: usize) -> Result<Self> {
        Self::new(image_size, image_size, patch_size)
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch_size
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch_size
    }

    /// Patch count N.
    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Flattened patch length P*P*3.
    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Pixel rectangle (y0, x0) of patch `i` in row-major grid order.
    pub fn patch_origin(&self, i: usize) -> (usize, usize) {
        let gc = self.grid_cols();
        ((i / gc) * self.patch_size, (i % gc) * self.patch_size)
    }
}

/// Split an image into the N x (P*P*3) patch matrix.
pub fn patchify(image: &Array3<f64>, spec: &PatchGridSpec) -> Result<Array2<f64>> {
    let shape = image.shape();
    if shape != [spec.height, spec.width, 3] {
        return Err(Error::InvalidShape(format!(
            "image {shape:?} does not match spec {}x{}x3",
            spec.height, spec.width
        )));
    }
    let p = spec.patch_size;
    let mut out = Array2::zeros((spec.num_patches(), spec.patch_len()));
    for i in 0..spec.num_patches() {
        let (y0, x0) = spec.patch_origin(i);
        let mut col = 0;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    out[[i, col]] = image[[y0 + dy, x0 + dx, c]];
                    col += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`]; bit-exact.
pub fn unpatchify(patches: &ArrayView2<f64>, spec: &PatchGridSpec) -> Result<Array3<f64>> {
    if patches.shape() != [spec.num_patches(), spec.patch_len()] {
        return Err(Error::InvalidShape(format!(
            "patch matrix {:?} does not match spec ({} x {})",
            patches.shape(),
            spec.num_patches(),
            spec.patch_len()
        )));
    }
    let p = spec.patch_size;
    let mut out = Array3::zeros((spec.height, spec.width, 3));
    for i in 0..spec.num_patches() {
        let (y0, x0) = spec.patch_origin(i);
        let mut col = 0;
        for dy in 0..p {
            for dx in 0..p {
                for c in 0..3 {
                    out[[y0 + dy, x0 + dx, c]] = patches[[i, col]];
                    col += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Draw a random binary mask with exactly `round(r * N)` ones.
/// The masked subset is uniform given the stream.
pub fn generate_mask(n: usize, ratio: f64, rng: &mut Stream) -> Result<Vec<u8>> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidParam(format!("mask ratio {ratio} outside [0,1)")));
    }
    let masked = (ratio * n as f64).round() as usize;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let mut mask = vec![0u8; n];
    for &i in indices.iter().take(masked) {
        mask[i] = 1;
    }
    Ok(mask)
}

/// Keep the rows with mask = 0 in ascending original-index order.
pub fn apply_mask(tokens: &ArrayView2<f64>, binary_mask: &[u8]) -> Result<TokenBatch> {
    let n = tokens.shape()[0];
    if binary_mask.len() != n {
        return Err(Error::InvalidShape(format!(
            "mask length {} != token rows {n}",
            binary_mask.len()
        )));
    }
    let index_map: Vec<usize> = (0..n).filter(|&i| binary_mask[i] == 0).collect();
    let mut kept = Array2::zeros((index_map.len(), tokens.shape()[1]));
    for (row, &i) in index_map.iter().enumerate() {
        kept.row_mut(row).assign(&tokens.row(i));
    }
    Ok(TokenBatch {
        tokens: kept,
        index_map,
        binary_mask: binary_mask.to_vec(),
        has_cls: false,
    })
}

/// Reinsert encoded tokens into original patch order, filling masked
/// positions with copies of the learnable mask token.
pub fn restore_order(
    encoded: &ArrayView2<f64>,
    mask_token: &[f64],
    binary_mask: &[u8],
) -> Result<Array2<f64>> {
    let n = binary_mask.len();
    let kept = binary_mask.iter().filter(|&&m| m == 0).count();
    if encoded.shape()[0] != kept {
        return Err(Error::InvalidShape(format!(
            "encoded rows {} != unmasked count {kept}",
            encoded.shape()[0]
        )));
    }
    let d = encoded.shape()[1];
    if mask_token.len() != d {
        return Err(Error::InvalidShape(format!(
            "mask token width {} != token width {d}",
            mask_token.len()
        )));
    }
    let mut out = Array2::zeros((n, d));
    let mut next = 0;
    for i in 0..n {
        if binary_mask[i] == 0 {
            out.row_mut(i).assign(&encoded.row(next));
            next += 1;
        } else {
            for (j, &v) in mask_token.iter().enumerate() {
                out[[i, j]] = v;
            }
        }
    }
    Ok(out)
}
