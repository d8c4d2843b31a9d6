//! Dataset directory layout:
//! `<root>/<split>/<domain>/images/*.png`, `masks/*.png` (8-bit grayscale),
//! `annotations.jsonl` (one record per sample).
//!
//! Ground-truth masks live in `masks/`; masks predicted by the segmentation
//! network are materialized next to them in `masks_pred/` so oracle-mode
//! runs keep their ground truth.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{Cube, Domain, ImageSample};
use crate::error::{Error, Result};
use crate::imgio;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

/// Which mask file accompanies a loaded sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskChoice {
    /// Ground-truth masks from `masks/`.
    GroundTruth,
    /// Predicted masks from `masks_pred/`.
    Predicted,
    /// Load no masks.
    None,
}

/// One line of `annotations.jsonl`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub sample_id: String,
    /// K x 3 millimeters; absent for unconstrained images.
    pub keypoints: Option<Vec<[f64; 3]>>,
    /// The metric cube heatmap targets use (root-relative).
    pub cube: Option<Cube>,
    pub rng_seed: u64,
}

pub fn domain_dir(root: &Path, split: Split, domain: Domain) -> PathBuf {
    root.join(split.to_string()).join(domain.to_string())
}

/// Persist one domain of one split. Masks are written only for samples that
/// carry them.
pub fn write_domain(
    root: &Path,
    split: Split,
    domain: Domain,
    samples: &[ImageSample],
    cube: Option<Cube>,
) -> Result<()> {
    let dir = domain_dir(root, split, domain);
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(images.display().to_string(), e))?;
    let masks = dir.join("masks");
    if samples.iter().any(|s| s.mask.is_some()) {
        fs::create_dir_all(&masks).map_err(|e| Error::io(masks.display().to_string(), e))?;
    }

    let ann_path = dir.join("annotations.jsonl");
    let mut ann = fs::File::create(&ann_path)
        .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    for s in samples {
        imgio::write_rgb(&images.join(format!("{}.png", s.sample_id)), &s.pixels)?;
        if let Some(m) = &s.mask {
            imgio::write_gray(&masks.join(format!("{}.png", s.sample_id)), m)?;
        }
        let record = AnnotationRecord {
            sample_id: s.sample_id.clone(),
            keypoints: s.keypoints.as_ref().map(|kp| {
                kp.rows()
                    .into_iter()
                    .map(|r| [r[0], r[1], r[2]])
                    .collect()
            }),
            cube: if s.keypoints.is_some() { cube } else { None },
            rng_seed: s.rng_seed,
        };
        let line = serde_json::to_string(&record)
            .map_err(|e| Error::Other(format!("annotation encode: {e}")))?;
        writeln!(ann, "{line}").map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    }
    Ok(())
}

/// Write predicted masks for a domain into `masks_pred/`.
pub fn write_predicted_masks(
    root: &Path,
    split: Split,
    domain: Domain,
    masks: &[(String, Array2<f64>)],
) -> Result<()> {
    let dir = domain_dir(root, split, domain).join("masks_pred");
    fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (id, m) in masks {
        imgio::write_gray(&dir.join(format!("{id}.png")), m)?;
    }
    Ok(())
}

/// Load one domain of one split in annotation order. Returns the samples and
/// the cube recorded for annotated samples (if any).
pub fn read_domain(
    root: &Path,
    split: Split,
    domain: Domain,
    mask_choice: MaskChoice,
) -> Result<(Vec<ImageSample>, Option<Cube>)> {
    let dir = domain_dir(root, split, domain);
    let ann_path = dir.join("annotations.jsonl");
    let file = fs::File::open(&ann_path)
        .map_err(|e| Error::io(ann_path.display().to_string(), e))?;
    let mask_dir = match mask_choice {
        MaskChoice::GroundTruth => Some(dir.join("masks")),
        MaskChoice::Predicted => Some(dir.join("masks_pred")),
        MaskChoice::None => None,
    };
    let mut samples = Vec::new();
    let mut cube = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(ann_path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: AnnotationRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Other(format!("annotation parse: {e}")))?;
        let pixels = imgio::read_rgb(&dir.join("images").join(format!("{}.png", record.sample_id)))?;
        let mask = match &mask_dir {
            Some(md) => {
                let p = md.join(format!("{}.png", record.sample_id));
                if p.exists() {
                    Some(imgio::read_gray(&p)?)
                } else {
                    None
                }
            }
            None => None,
        };
        let keypoints = record.keypoints.as_ref().map(|kp| {
            Array2::from_shape_fn((kp.len(), 3), |(i, j)| kp[i][j])
        });
        if record.cube.is_some() {
            cube = record.cube;
        }
        samples.push(ImageSample {
            pixels,
            mask,
            keypoints,
            domain,
            sample_id: record.sample_id,
            rng_seed: record.rng_seed,
        });
    }
    Ok((samples, cube))
}

/// Load every PNG in a folder as an unconstrained image, center-cropped and
/// resized. Sorted by filename for reproducibility.
pub fn read_image_folder(dir: &Path, size: usize) -> Result<Vec<ndarray::Array3<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(imgio::center_crop_resize(&imgio::read_rgb(p)?, size)))
        .collect()
}
