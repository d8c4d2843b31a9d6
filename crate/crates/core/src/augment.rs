//! Background-swap augmentation with the unconstrained set, plus standard
//! geometric and photometric augmentation.
//!
//! The geometric map is a pixel-space similarity (rotate, scale, translate
//! about the image center). Masks are warped with the image; keypoints are
//! re-derived from the same map through the orthographic camera, with depth
//! scaled uniformly so the thickness-depth cue stays consistent.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::config::AugmentConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::imgio::bilinear;
use crate::seeds::Stream;

/// Alpha-blend a new background behind the foreground:
/// `out = mask * image + (1 - mask) * background`.
/// The sample's mask and keypoints are untouched by contract.
pub fn background_swap(
    image: &Array3<f64>,
    mask: &Array2<f64>,
    background: &Array3<f64>,
) -> Result<Array3<f64>> {
    if image.shape() != background.shape() {
        return Err(Error::InvalidShape(format!(
            "image {:?} vs background {:?}",
            image.shape(),
            background.shape()
        )));
    }
    if mask.shape() != [image.shape()[0], image.shape()[1]] {
        return Err(Error::InvalidShape(format!(
            "mask {:?} does not match image {:?}",
            mask.shape(),
            image.shape()
        )));
    }
    let mut out = image.clone();
    for y in 0..image.shape()[0] {
        for x in 0..image.shape()[1] {
            let a = mask[[y, x]];
            if a < 1.0 {
                for c in 0..3 {
                    out[[y, x, c]] = a * image[[y, x, c]] + (1.0 - a) * background[[y, x, c]];
                }
            }
        }
    }
    Ok(out)
}

/// The sampled parameters of one geometric + photometric augmentation.
#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub rotation_rad: f64,
    pub translate_px: (f64, f64),
    pub scale: f64,
    pub brightness: f64,
    pub contrast: f64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            rotation_rad: 0.0,
            translate_px: (0.0, 0.0),
            scale: 1.0,
            brightness: 0.0,
            contrast: 1.0,
        }
    }

    pub fn sample(cfg: &AugmentConfig, image_size: usize, rng: &mut Stream) -> Result<Self> {
        if cfg.scale_lo <= 0.0 || cfg.scale_hi < cfg.scale_lo {
            return Err(Error::InvalidParam(format!(
                "degenerate scale range ({}, {})",
                cfg.scale_lo, cfg.scale_hi
            )));
        }
        let deg = cfg.rotation_deg.to_radians();
        let t_max = cfg.translate_frac * image_size as f64;
        Ok(AugmentParams {
            rotation_rad: if deg > 0.0 { rng.random_range(-deg..=deg) } else { 0.0 },
            translate_px: (
                if t_max > 0.0 { rng.random_range(-t_max..=t_max) } else { 0.0 },
                if t_max > 0.0 { rng.random_range(-t_max..=t_max) } else { 0.0 },
            ),
            scale: if cfg.scale_hi > cfg.scale_lo {
                rng.random_range(cfg.scale_lo..=cfg.scale_hi)
            } else {
                cfg.scale_lo
            },
            brightness: if cfg.jitter > 0.0 {
                rng.random_range(-cfg.jitter..=cfg.jitter)
            } else {
                0.0
            },
            contrast: if cfg.jitter > 0.0 {
                rng.random_range(1.0 - cfg.jitter..=1.0 + cfg.jitter)
            } else {
                1.0
            },
        })
    }

    /// Forward pixel map: rotate by `rotation_rad` and scale about the image
    /// center, then translate.
    pub fn map_pixel(&self, (px, py): (f64, f64), center: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (px - center, py - center);
        (
            self.scale * (c * dx - s * dy) + center + self.translate_px.0,
            self.scale * (s * dx + c * dy) + center + self.translate_px.1,
        )
    }

    /// Inverse pixel map (used for resampling).
    fn unmap_pixel(&self, (px, py): (f64, f64), center: f64) -> (f64, f64) {
        let (s, c) = self.rotation_rad.sin_cos();
        let (dx, dy) = (
            (px - center - self.translate_px.0) / self.scale,
            (py - center - self.translate_px.1) / self.scale,
        );
        (c * dx + s * dy + center, -s * dx + c * dy + center)
    }
}

fn warp_image(image: &Array3<f64>, params: &AugmentParams) -> Array3<f64> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let center = h as f64 / 2.0 - 0.5;
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (sx, sy) = params.unmap_pixel((x as f64, y as f64), center);
        bilinear(image, sy, sx, c)
    })
}

fn warp_mask(mask: &Array2<f64>, params: &AugmentParams) -> Array2<f64> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let center = h as f64 / 2.0 - 0.5;
    let as3 = Array3::from_shape_fn((h, w, 1), |(y, x, _)| mask[[y, x]]);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = params.unmap_pixel((x as f64, y as f64), center);
        bilinear(&as3, sy, sx, 0)
    })
}

/// Apply one sampled augmentation to a sample: image and mask are warped by
/// the same map, keypoints are re-derived from the pixel map through the
/// orthographic camera (depth scales with the zoom), and color jitter
/// touches the image only. Deterministic per stream.
pub fn standard_augment(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    px_per_mm: f64,
    rng: &mut Stream,
) -> Result<ImageSample> {
    let params = AugmentParams::sample(cfg, sample.height(), rng)?;
    Ok(apply_augment(sample, &params, px_per_mm))
}

/// Deterministic core of [`standard_augment`].
pub fn apply_augment(sample: &ImageSample, params: &AugmentParams, px_per_mm: f64) -> ImageSample {
    let mut pixels = warp_image(&sample.pixels, params);
    // Photometric jitter: contrast about mid-gray, then brightness.
    for v in pixels.iter_mut() {
        *v = (params.contrast * (*v - 0.5) + 0.5 + params.brightness).clamp(0.0, 1.0);
    }
    let mask = sample.mask.as_ref().map(|m| warp_mask(m, params));

    // Keypoints follow the pixel map exactly: with px = c + k*x and
    // py = c - k*y, the pixel similarity becomes
    //   x' = s*(cos t * x + sin t * y) + tx/k
    //   y' = s*(cos t * y - sin t * x) - ty/k
    // and depth scales by s.
    let keypoints = sample.keypoints.as_ref().map(|kp| {
        let (s, c) = params.rotation_rad.sin_cos();
        let mut out = kp.clone();
        for mut row in out.rows_mut() {
            let (x, y, z) = (row[0], row[1], row[2]);
            row[0] = params.scale * (c * x + s * y) + params.translate_px.0 / px_per_mm;
            row[1] = params.scale * (c * y - s * x) - params.translate_px.1 / px_per_mm;
            row[2] = params.scale * z;
        }
        out
    });

    ImageSample {
        pixels,
        mask,
        keypoints,
        domain: sample.domain,
        sample_id: sample.sample_id.clone(),
        rng_seed: sample.rng_seed,
    }
}
