//! End-to-end orchestration over a persisted dataset: mask preparation
//! (training the segmentation network when masks are learned), the two
//! training stages, evaluation and the ablation grid.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TargetMaskSource};
use crate::data::{Domain, ImageSample};
use crate::dataset::{self, MaskChoice, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate, probe_attention, EvalReport};
use crate::head::KeypointHead;
use crate::runs::RunDir;
use crate::segmenter::{mask_iou, train_segmenter, Segmenter};
use crate::seeds;
use crate::train::{finetune, pretrain, FinetuneRecord, PretrainRecord, TrainData};
use crate::vit::Encoder;

/// The runnable method variants of the ablation grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Pre-training + fine-tuning with every term enabled.
    Full,
    /// Uniform reconstruction weights.
    WithoutFcr,
    /// No attention term during fine-tuning.
    WithoutAr,
    /// Plain masked-autoencoder baseline: neither weighting nor attention.
    WithoutBoth,
    /// No target-domain masks: uniform target weights, no target swap.
    WithoutTargetMasks,
    /// No background-swap augmentation with the unconstrained set.
    WithoutUnconstrained,
    /// Supervised training only; no pre-training, no attention term.
    Scratch,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::WithoutFcr,
        Variant::WithoutAr,
        Variant::WithoutBoth,
        Variant::WithoutTargetMasks,
        Variant::WithoutUnconstrained,
        Variant::Scratch,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::WithoutFcr => "no_fcr",
            Variant::WithoutAr => "no_ar",
            Variant::WithoutBoth => "no_fcr_no_ar",
            Variant::WithoutTargetMasks => "no_target_masks",
            Variant::WithoutUnconstrained => "no_unconstrained",
            Variant::Scratch => "scratch",
        }
    }

    /// Whether this variant runs the pre-training stage.
    pub fn pretrains(&self) -> bool {
        !matches!(self, Variant::Scratch)
    }
}

/// Resolve a variant into a concrete configuration.
pub fn apply_variant(base: &ModelConfig, variant: Variant) -> ModelConfig {
    let mut cfg = base.clone();
    match variant {
        Variant::Full => {}
        Variant::WithoutFcr => cfg.ablation.fcr = false,
        Variant::WithoutAr => cfg.ablation.ar = false,
        Variant::WithoutBoth => {
            cfg.ablation.fcr = false;
            cfg.ablation.ar = false;
        }
        Variant::WithoutTargetMasks => cfg.ablation.target_masks = TargetMaskSource::None,
        Variant::WithoutUnconstrained => cfg.ablation.bg_aug = false,
        Variant::Scratch => {
            cfg.ablation.ar = false;
            cfg.ablation.fcr = false;
        }
    }
    cfg
}

/// Dataset loaded once per (root, seed): ground-truth and learned target
/// masks are both kept so every variant can derive its own view.
pub struct PreparedData {
    pub source_train: Vec<ImageSample>,
    /// Target training samples with ground-truth masks attached.
    pub target_train_gt: Vec<ImageSample>,
    /// Learned target masks, aligned with `target_train_gt`.
    pub learned_masks: Option<Vec<Array2<f64>>>,
    pub unconstrained: Vec<ndarray::Array3<f64>>,
    pub test_source: Vec<ImageSample>,
    pub test_target: Vec<ImageSample>,
    pub segmenter: Option<Segmenter>,
    /// Mean IoU of predicted vs ground-truth masks on held-out source.
    pub seg_iou_source: Option<f64>,
    /// Same on held-out target: the measurable domain gap.
    pub seg_iou_target: Option<f64>,
}

/// Load the dataset and, when masks are learned, train the segmentation
/// network on source and materialize predicted target masks to the dataset
/// tree (`masks_pred/`).
pub fn prepare(cfg: &ModelConfig, root: &Path, seed: u64) -> Result<PreparedData> {
    let (source_train, _) = dataset::read_domain(root, Split::Train, Domain::Source, MaskChoice::GroundTruth)?;
    let (target_train_gt, _) =
        dataset::read_domain(root, Split::Train, Domain::Target, MaskChoice::GroundTruth)?;
    let (test_source, _) =
        dataset::read_domain(root, Split::Test, Domain::Source, MaskChoice::GroundTruth)?;
    let (test_target, _) =
        dataset::read_domain(root, Split::Test, Domain::Target, MaskChoice::GroundTruth)?;
    let unconstrained: Vec<ndarray::Array3<f64>> =
        dataset::read_domain(root, Split::Train, Domain::Unconstrained, MaskChoice::None)
            .map(|(samples, _)| samples.into_iter().map(|s| s.pixels).collect())
            .unwrap_or_default();

    let needs_segmenter = cfg.ablation.target_masks == TargetMaskSource::Learned;
    let (segmenter, learned_masks, seg_iou_source, seg_iou_target) = if needs_segmenter {
        let (net, _trace) =
            train_segmenter(&source_train, &cfg.segmenter, seeds::derive(seed, "segmenter"))?;

        let predict_all = |samples: &[ImageSample]| -> Result<Vec<Array2<f64>>> {
            samples
                .par_iter()
                .map(|s| net.segment(&s.pixels))
                .collect()
        };
        let masks = predict_all(&target_train_gt)?;
        dataset::write_predicted_masks(
            root,
            Split::Train,
            Domain::Target,
            &target_train_gt
                .iter()
                .zip(&masks)
                .map(|(s, m)| (s.sample_id.clone(), m.clone()))
                .collect::<Vec<_>>(),
        )?;

        let mean_iou = |samples: &[ImageSample]| -> Result<f64> {
            let preds = predict_all(samples)?;
            let mut total = 0.0;
            for (s, p) in samples.iter().zip(&preds) {
                let gt = s.mask.as_ref().ok_or_else(|| {
                    Error::MissingAnnotation(format!("{} has no mask", s.sample_id))
                })?;
                total += mask_iou(p, gt);
            }
            Ok(total / samples.len() as f64)
        };
        let iou_s = mean_iou(&test_source)?;
        let iou_t = mean_iou(&test_target)?;
        (Some(net), Some(masks), Some(iou_s), Some(iou_t))
    } else {
        (None, None, None, None)
    };

    Ok(PreparedData {
        source_train,
        target_train_gt,
        learned_masks,
        unconstrained,
        test_source,
        test_target,
        segmenter,
        seg_iou_source,
        seg_iou_target,
    })
}

/// Build the training view of the prepared data for one configuration.
pub fn variant_data(prepared: &PreparedData, cfg: &ModelConfig) -> Result<TrainData> {
    let target: Vec<ImageSample> = match cfg.ablation.target_masks {
        TargetMaskSource::Oracle => prepared.target_train_gt.clone(),
        TargetMaskSource::None => prepared
            .target_train_gt
            .iter()
            .map(|s| {
                let mut s = s.clone();
                s.mask = None;
                s
            })
            .collect(),
        TargetMaskSource::Learned => {
            let masks = prepared.learned_masks.as_ref().ok_or_else(|| {
                Error::MissingAnnotation(
                    "learned target masks requested but not prepared; train the segmenter first"
                        .into(),
                )
            })?;
            prepared
                .target_train_gt
                .iter()
                .zip(masks)
                .map(|(s, m)| {
                    let mut s = s.clone();
                    s.mask = Some(m.clone());
                    s
                })
                .collect()
        }
    };
    Ok(TrainData {
        source: prepared.source_train.clone(),
        target,
        unconstrained: prepared.unconstrained.clone(),
    })
}

/// One variant's end-to-end outcome.
pub struct VariantOutcome {
    pub variant: Variant,
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub head: KeypointHead,
    pub eval: EvalReport,
    /// Mean foreground attention mass over the evaluated target samples.
    pub fg_attention_mass: f64,
    pub pretrain_trace: Vec<PretrainRecord>,
    pub finetune_trace: Vec<FinetuneRecord>,
}

/// Aggregate row reported by the ablation grid.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub epe_mm: f64,
    pub mpjpe_mm: f64,
    pub pa_mpjpe_mm: f64,
    pub fg_attention_mass: f64,
}

/// Train one variant end to end on prepared data and evaluate on the target
/// test split.
pub fn run_variant(
    base_cfg: &ModelConfig,
    variant: Variant,
    prepared: &PreparedData,
    seed: u64,
    runs_root: Option<&Path>,
) -> Result<VariantOutcome> {
    let cfg = apply_variant(base_cfg, variant);
    let data = variant_data(prepared, &cfg)?;

    let make_run = |stage: &str| -> Result<Option<RunDir>> {
        match runs_root {
            Some(root) => Ok(Some(RunDir::create(
                &root.join(format!("{}_{stage}", variant.label())),
                &cfg,
                seed,
            )?)),
            None => Ok(None),
        }
    };

    let (pretrained, pretrain_trace) = if variant.pretrains() {
        let run = make_run("pretrain")?;
        let (enc, _dec, trace) = pretrain(&cfg, &data, seed, run.as_ref())?;
        (Some(enc), trace)
    } else {
        (None, Vec::new())
    };

    let run = make_run("finetune")?;
    let (encoder, head, finetune_trace) =
        finetune(&cfg, &data, pretrained.as_ref(), seed, run.as_ref())?;

    let eval = evaluate(&encoder, &head, &prepared.test_target, &cfg)?;
    let probe = probe_attention(&encoder, &prepared.test_target, &cfg, None)?;
    let masses: Vec<f64> = probe.iter().filter_map(|r| r.fg_attention_mass).collect();
    let fg_attention_mass = if masses.is_empty() {
        0.0
    } else {
        masses.iter().sum::<f64>() / masses.len() as f64
    };

    Ok(VariantOutcome {
        variant,
        config: cfg,
        encoder,
        head,
        eval,
        fg_attention_mass,
        pretrain_trace,
        finetune_trace,
    })
}

impl VariantOutcome {
    pub fn summary(&self) -> VariantSummary {
        VariantSummary {
            variant: self.variant.label().to_string(),
            epe_mm: self.eval.summary.epe_mm,
            mpjpe_mm: self.eval.summary.mpjpe_mm,
            pa_mpjpe_mm: self.eval.summary.pa_mpjpe_mm,
            fg_attention_mass: self.fg_attention_mass,
        }
    }
}

/// Render the ablation-grid comparison table.
pub fn format_table(rows: &[VariantSummary]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>10} {:>10} {:>12} {:>10}\n",
        "variant", "EPE(mm)", "MPJPE(mm)", "PA-MPJPE(mm)", "fg-attn"
    ));
    out.push_str(&"-".repeat(64));
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>10.2} {:>10.2} {:>12.2} {:>10.3}\n",
            r.variant, r.epe_mm, r.mpjpe_mm, r.pa_mpjpe_mm, r.fg_attention_mass
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GenConfig, GenCounts};

    fn tiny_gen() -> GenConfig {
        GenConfig::toy(GenCounts {
            train_source: 8,
            train_target: 8,
            train_unconstrained: 4,
            test_source: 4,
            test_target: 4,
        })
    }

    fn fast_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.pretrain.steps = 3;
        cfg.pretrain.batch_size = 4;
        cfg.finetune.steps = 3;
        cfg.finetune.batch_size = 3;
        cfg.segmenter.stage.steps = 10;
        cfg.segmenter.stage.batch_size = 4;
        cfg
    }

    #[test]
    fn prepare_trains_segmenter_and_materializes_masks() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen(), dir.path(), 11).unwrap();
        let cfg = fast_cfg();
        let prepared = prepare(&cfg, dir.path(), 11).unwrap();
        assert!(prepared.segmenter.is_some());
        assert!(prepared.learned_masks.is_some());
        assert!(prepared.seg_iou_source.is_some());
        let pred_dir = dir.path().join("train/target/masks_pred");
        assert!(pred_dir.exists());
        assert_eq!(std::fs::read_dir(pred_dir).unwrap().count(), 8);
    }

    #[test]
    fn variant_data_respects_mask_source() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen(), dir.path(), 12).unwrap();
        let mut cfg = fast_cfg();
        cfg.ablation.target_masks = TargetMaskSource::Oracle;
        let prepared = prepare(&cfg, dir.path(), 12).unwrap();

        let data = variant_data(&prepared, &cfg).unwrap();
        assert!(data.target.iter().all(|s| s.mask.is_some()));

        let none_cfg = apply_variant(&cfg, Variant::WithoutTargetMasks);
        let data = variant_data(&prepared, &none_cfg).unwrap();
        assert!(data.target.iter().all(|s| s.mask.is_none()));

        // Learned masks were not prepared under oracle mode.
        let mut learned_cfg = cfg.clone();
        learned_cfg.ablation.target_masks = TargetMaskSource::Learned;
        assert!(variant_data(&prepared, &learned_cfg).is_err());
    }

    #[test]
    fn scratch_variant_runs_without_pretraining() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen(), dir.path(), 13).unwrap();
        let mut cfg = fast_cfg();
        cfg.ablation.target_masks = TargetMaskSource::Oracle;
        let prepared = prepare(&cfg, dir.path(), 13).unwrap();
        let outcome = run_variant(&cfg, Variant::Scratch, &prepared, 13, None).unwrap();
        assert!(outcome.pretrain_trace.is_empty());
        assert_eq!(outcome.eval.summary.n_samples, 4);
        assert!(outcome.eval.summary.epe_mm.is_finite());
    }

    #[test]
    fn table_formats_all_variants() {
        let rows: Vec<VariantSummary> = Variant::ALL
            .iter()
            .map(|v| VariantSummary {
                variant: v.label().to_string(),
                epe_mm: 10.0,
                mpjpe_mm: 9.0,
                pa_mpjpe_mm: 8.0,
                fg_attention_mass: 0.5,
            })
            .collect();
        let table = format_table(&rows);
        for v in Variant::ALL {
            assert!(table.contains(v.label()));
        }
    }
}
