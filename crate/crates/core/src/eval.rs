//! Evaluation driver and the qualitative attention probe.

use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::head::KeypointHead;
use crate::heatmap::{heatmaps_to_keypoints, root_relative};
use crate::imgio;
use crate::metrics::{epe, mpjpe, pa_mpjpe, MetricsSummary};
use crate::patching::{patchify, PatchGridSpec};
use crate::vit::Encoder;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub epe_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub summary: MetricsSummary,
    pub per_sample: Vec<SampleMetrics>,
}

impl EvalReport {
    /// Deterministic serialization: `report.json` plus a per-sample CSV.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let json = serde_json::to_string_pretty(&self.summary)
            .map_err(|e| Error::Other(format!("report encode: {e}")))?;
        let jpath = dir.join("report.json");
        std::fs::write(&jpath, json).map_err(|e| Error::io(jpath.display().to_string(), e))?;
        let mut csv = String::from("sample_id,epe_mm,mpjpe_mm,pa_mpjpe_mm\n");
        for s in &self.per_sample {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                s.sample_id, s.epe_mm, s.mpjpe_mm, s.pa_mpjpe_mm
            ));
        }
        let cpath = dir.join("per_sample.csv");
        std::fs::write(&cpath, csv).map_err(|e| Error::io(cpath.display().to_string(), e))?;
        Ok(())
    }
}

/// Predict root-relative keypoints for one sample.
pub fn predict_keypoints(
    encoder: &Encoder,
    head: &KeypointHead,
    sample: &ImageSample,
    cfg: &ModelConfig,
) -> Result<Array2<f64>> {
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size)?;
    let patches = patchify(&sample.pixels, &spec)?;
    let encoded = encoder.forward(&patches.view(), None)?;
    let tokens = encoded.tokens.slice(ndarray::s![1.., ..]).to_owned();
    let volumes = head.forward_eval(&[tokens])?;
    let hm = crate::data::Heatmap3D {
        volume: volumes.into_iter().next().unwrap(),
        cube: crate::data::Cube::root_relative(cfg.cube_side_mm),
        sigma: cfg.sigma_voxels,
    };
    Ok(heatmaps_to_keypoints(&hm)?.keypoints)
}

/// Run the full inference path over annotated samples and aggregate the
/// three pose metrics. Deterministic; parallel over samples.
pub fn evaluate(
    encoder: &Encoder,
    head: &KeypointHead,
    samples: &[ImageSample],
    cfg: &ModelConfig,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::MissingAnnotation("no samples to evaluate".into()));
    }
    let per_sample: Result<Vec<SampleMetrics>> = samples
        .par_iter()
        .map(|sample| {
            let gt = sample.keypoints.as_ref().ok_or_else(|| {
                Error::MissingAnnotation(format!("sample {} has no keypoints", sample.sample_id))
            })?;
            let gt_rel = root_relative(gt, cfg.root_joint);
            let pred = predict_keypoints(encoder, head, sample, cfg)?;
            let e = if cfg.epe_root_align {
                mpjpe(&pred, &gt_rel, cfg.root_joint)?
            } else {
                epe(&pred, &gt_rel)?
            };
            Ok(SampleMetrics {
                sample_id: sample.sample_id.clone(),
                epe_mm: e,
                mpjpe_mm: mpjpe(&pred, &gt_rel, cfg.root_joint)?,
                pa_mpjpe_mm: pa_mpjpe(&pred, &gt_rel)?,
            })
        })
        .collect();
    let per_sample = per_sample?;
    let n = per_sample.len();
    let mean = |f: &dyn Fn(&SampleMetrics) -> f64| {
        per_sample.iter().map(|s| f(s)).sum::<f64>() / n as f64
    };
    Ok(EvalReport {
        summary: MetricsSummary {
            epe_mm: mean(&|s| s.epe_mm),
            mpjpe_mm: mean(&|s| s.mpjpe_mm),
            pa_mpjpe_mm: mean(&|s| s.pa_mpjpe_mm),
            n_samples: n,
        },
        per_sample,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub sample_id: String,
    /// Share of attention mass inside the foreground mask, when a mask
    /// exists: sum(map * mask) / sum(map).
    pub fg_attention_mass: Option<f64>,
}

/// Block-averaged class-attention map of one image, upscaled to pixels.
pub fn attention_map(encoder: &Encoder, sample: &ImageSample, cfg: &ModelConfig) -> Result<Array2<f64>> {
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size)?;
    let patches = patchify(&sample.pixels, &spec)?;
    let encoded = encoder.forward(&patches.view(), None)?;
    let stack = encoded.stack.expect("full-token mode");
    let side = cfg.grid_side();
    let mut coarse = Array2::zeros((side, side));
    for row in stack.rows.rows() {
        for (i, &v) in row.iter().enumerate() {
            coarse[[i / side, i % side]] += v / stack.rows.shape()[0] as f64;
        }
    }
    // Bilinear upscale to image resolution.
    let as3 = Array3::from_shape_fn((side, side, 1), |(y, x, _)| coarse[[y, x]]);
    let scale = cfg.image_size as f64 / side as f64;
    Ok(Array2::from_shape_fn(
        (cfg.image_size, cfg.image_size),
        |(y, x)| {
            let sy = (y as f64 + 0.5) / scale - 0.5;
            let sx = (x as f64 + 0.5) / scale - 0.5;
            imgio::bilinear(&as3, sy, sx, 0)
        },
    ))
}

/// Emit one heat-colormap overlay per image and report per-image foreground
/// attention mass. Output files are named `attn_<sample_id>.png`.
pub fn probe_attention(
    encoder: &Encoder,
    samples: &[ImageSample],
    cfg: &ModelConfig,
    out_dir: Option<&Path>,
) -> Result<Vec<ProbeRecord>> {
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }
    let maps: Result<Vec<(Array2<f64>, &ImageSample)>> = samples
        .par_iter()
        .map(|s| attention_map(encoder, s, cfg).map(|m| (m, s)))
        .collect();
    let mut records = Vec::new();
    for (map, sample) in maps? {
        let total: f64 = map.iter().sum();
        let fg_attention_mass = sample.mask.as_ref().map(|mask| {
            let fg: f64 = map
                .iter()
                .zip(mask.iter())
                .map(|(&a, &m)| a * if m >= 0.5 { 1.0 } else { 0.0 })
                .sum();
            fg / total.max(1e-300)
        });
        if let Some(dir) = out_dir {
            let lo = map.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = map.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let range = (hi - lo).max(1e-12);
            let overlay = Array3::from_shape_fn(
                (cfg.image_size, cfg.image_size, 3),
                |(y, x, c)| {
                    let heat = imgio::heat_color((map[[y, x]] - lo) / range)[c];
                    0.45 * sample.pixels[[y, x, c]] + 0.55 * heat
                },
            );
            imgio::write_rgb(&dir.join(format!("attn_{}.png", sample.sample_id)), &overlay)?;
        }
        records.push(ProbeRecord {
            sample_id: sample.sample_id.clone(),
            fg_attention_mass,
        });
    }
    Ok(records)
}
