//! The two-stage training procedure: masked reconstruction pre-training of
//! encoder and decoder, then supervised fine-tuning of encoder and keypoint
//! head with attention matching on target images against a frozen copy of
//! the pre-trained encoder.

use ndarray::{Array2, Array3, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::augment::{background_swap, standard_augment};
use crate::config::{FinetuneMode, ModelConfig};
use crate::data::{AttentionStack, Cube, ImageSample, PatchWeights};
use crate::error::{Error, Result};
use crate::head::KeypointHead;
use crate::heatmap::{keypoints_to_heatmaps, root_relative};
use crate::losses::{
    attention_l1, attention_l1_grad, heatmap_loss_grad, masked_recon_grad, masked_recon_loss,
};
use crate::nn::{self, ParamMut, ParamRef, ParamSet};
use crate::optim::{Optimizer, Schedule};
use crate::patching::{generate_mask, patchify, unpatchify, PatchGridSpec};
use crate::runs::RunDir;
use crate::seeds::{self, Stream};
use crate::vit::{Decoder, Encoder};
use crate::weighting::{patch_foreground_ratio, patch_weights};

/// Training inputs, already resident in memory.
pub struct TrainData {
    /// Labeled source samples with ground-truth masks.
    pub source: Vec<ImageSample>,
    /// Unlabeled target samples; masks per the configured source, possibly
    /// absent. Keypoints, when present, are never read by training.
    pub target: Vec<ImageSample>,
    /// Replacement backgrounds.
    pub unconstrained: Vec<Array3<f64>>,
}

/// Encoder + decoder as one optimizable unit.
pub struct EncDec {
    pub encoder: Encoder,
    pub decoder: Decoder,
}

impl ParamSet for EncDec {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        let mut out = self.encoder.entries();
        out.extend(self.decoder.entries());
        out
    }
    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = self.encoder.entries_mut();
        out.extend(self.decoder.entries_mut());
        out
    }
}

/// Encoder + keypoint head as one optimizable unit.
pub struct EncHead {
    pub encoder: Encoder,
    pub head: KeypointHead,
}

impl ParamSet for EncHead {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        let mut out = self.encoder.entries();
        out.extend(self.head.entries());
        out
    }
    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = self.encoder.entries_mut();
        out.extend(self.head.entries_mut());
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FinetuneRecord {
    pub step: usize,
    pub kpt_loss: f64,
    pub attn_loss: f64,
    pub total_loss: f64,
    pub lr: f64,
}

/// Deterministic epoch-reshuffled index stream.
struct BatchSampler {
    pool: Vec<usize>,
    len: usize,
    rng: Stream,
}

impl BatchSampler {
    fn new(len: usize, seed: u64) -> Self {
        BatchSampler {
            pool: Vec::new(),
            len,
            rng: seeds::stream(seed),
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pool.is_empty() {
                let mut epoch: Vec<usize> = (0..self.len).collect();
                epoch.shuffle(&mut self.rng);
                self.pool = epoch;
            }
            out.push(self.pool.remove(0));
        }
        out
    }
}

/// One augmented pre-training view of a sample: the network input image with
/// its transformed mask.
fn pretrain_view(
    sample: &ImageSample,
    cfg: &ModelConfig,
    unconstrained: &[Array3<f64>],
    rng: &mut Stream,
) -> Result<ImageSample> {
    let mut view = sample.clone();
    if cfg.ablation.bg_aug && !unconstrained.is_empty() {
        if let Some(mask) = &view.mask {
            if rng.random::<f64>() < cfg.augment.bg_swap_prob {
                let bg = &unconstrained[rng.random_range(0..unconstrained.len())];
                view.pixels = background_swap(&view.pixels, mask, bg)?;
            }
        }
    }
    standard_augment(&view, &cfg.augment, cfg.px_per_mm, rng)
}

/// Per-patch weights for the reconstruction loss of one view.
fn view_weights(view: &ImageSample, cfg: &ModelConfig, spec: &PatchGridSpec) -> Result<PatchWeights> {
    if !cfg.ablation.fcr {
        return Ok(PatchWeights::uniform(spec.num_patches()));
    }
    match &view.mask {
        Some(mask) => {
            let ratios = patch_foreground_ratio(&mask.view(), spec)?;
            patch_weights(&ratios, cfg.alpha)
        }
        // Per the mask ablations: domains without a usable mask fall back
        // to uniform weights.
        None => Ok(PatchWeights::uniform(spec.num_patches())),
    }
}

/// Masked-reconstruction pre-training of encoder and decoder over the union
/// of source and target images.
pub fn pretrain(
    cfg: &ModelConfig,
    data: &TrainData,
    seed: u64,
    run: Option<&RunDir>,
) -> Result<(Encoder, Decoder, Vec<PretrainRecord>)> {
    cfg.validate()?;
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size)?;
    if cfg.ablation.fcr && data.source.iter().any(|s| s.mask.is_none()) {
        return Err(Error::MissingAnnotation(
            "foreground weighting needs source masks".into(),
        ));
    }

    let mut model = EncDec {
        encoder: Encoder::init(cfg, &mut seeds::stream(seeds::derive(seed, "init-encoder"))),
        decoder: Decoder::init(cfg, &mut seeds::stream(seeds::derive(seed, "init-decoder"))),
    };
    let mut opt = Optimizer::new(cfg.pretrain.weight_decay);
    let schedule = Schedule::from_stage(&cfg.pretrain)?;

    // Source and target images are pooled; each index addresses the union.
    let all: Vec<&ImageSample> = data.source.iter().chain(data.target.iter()).collect();
    if all.is_empty() {
        return Err(Error::MissingAnnotation("no pre-training images".into()));
    }
    let mut sampler = BatchSampler::new(all.len(), seeds::derive(seed, "pretrain-order"));
    let snapshot_every = (cfg.pretrain.steps / 5).max(1);
    let mut trace = Vec::with_capacity(cfg.pretrain.steps);

    for step in 0..cfg.pretrain.steps {
        let batch_idx = sampler.next_batch(cfg.pretrain.batch_size);
        let batch = cfg.pretrain.batch_size;

        let parts: Result<Vec<(f64, Encoder, Decoder, Option<(Array2<f64>, Array3<f64>)>)>> =
            batch_idx
                .par_iter()
                .enumerate()
                .map(|(slot, &idx)| {
                    let counter = (step * batch + slot) as u64;
                    let mut rng = seeds::stream(seeds::derive_idx(seed, "pretrain", counter));
                    let view = pretrain_view(all[idx], cfg, &data.unconstrained, &mut rng)?;
                    let weights = view_weights(&view, cfg, &spec)?;
                    let mask = generate_mask(spec.num_patches(), cfg.mask_ratio, &mut rng)?;

                    let patches = patchify(&view.pixels, &spec)?;
                    let encoded = model.encoder.forward(&patches.view(), Some(&mask))?;
                    let (recon, dec_cache) =
                        model.decoder.forward(&encoded.tokens.view(), &mask)?;

                    let loss =
                        masked_recon_loss(&recon.view(), &patches.view(), &weights, &mask)?;
                    let d_recon =
                        masked_recon_grad(&recon.view(), &patches.view(), &weights, &mask, batch);
                    let (dec_grads, d_tokens) = model.decoder.backward(&dec_cache, &d_recon.view());
                    let enc_grads = model.encoder.backward(&encoded.cache, &d_tokens.view(), None);

                    let snapshot = (slot == 0).then(|| (recon, view.pixels.clone()));
                    Ok((loss / batch as f64, enc_grads, dec_grads, snapshot))
                })
                .collect();
        let parts = parts?;

        let mut loss = 0.0;
        let mut grads: Option<EncDec> = None;
        let mut first_snapshot = None;
        for (l, enc_g, dec_g, snap) in parts {
            loss += l;
            if first_snapshot.is_none() {
                first_snapshot = snap;
            }
            match &mut grads {
                None => {
                    grads = Some(EncDec {
                        encoder: enc_g,
                        decoder: dec_g,
                    })
                }
                Some(acc) => {
                    nn::add_assign(&mut acc.encoder, &enc_g);
                    nn::add_assign(&mut acc.decoder, &dec_g);
                }
            }
        }
        let grads = grads.expect("non-empty batch");
        let lr = schedule.lr_at(step)?;
        opt.apply(&mut model, &grads, lr)?;
        if !nn::all_finite(&model) {
            return Err(Error::NonFiniteGradient(format!("pretrain step {step}")));
        }

        let record = PretrainRecord { step, loss, lr };
        if let Some(run) = run {
            run.append_metric(&record)?;
            if step % snapshot_every == 0 || step + 1 == cfg.pretrain.steps {
                if let Some((recon, input)) = first_snapshot {
                    let img = unpatchify(&recon.view(), &spec)?;
                    let mut side = Array3::zeros((cfg.image_size, 2 * cfg.image_size, 3));
                    for y in 0..cfg.image_size {
                        for x in 0..cfg.image_size {
                            for ch in 0..3 {
                                side[[y, x, ch]] = input[[y, x, ch]];
                                side[[y, x + cfg.image_size, ch]] =
                                    img[[y, x, ch]].clamp(0.0, 1.0);
                            }
                        }
                    }
                    crate::imgio::write_rgb(&run.path(&format!("recon_{step:06}.png")), &side)?;
                }
            }
        }
        trace.push(record);
    }
    Ok((model.encoder, model.decoder, trace))
}

fn heatmap_target(
    sample: &ImageSample,
    cfg: &ModelConfig,
    cube: Cube,
) -> Result<Array4<f64>> {
    let kp = sample.keypoints.as_ref().ok_or_else(|| {
        Error::MissingAnnotation(format!("sample {} has no keypoints", sample.sample_id))
    })?;
    let rel = root_relative(kp, cfg.root_joint);
    let (hm, _) = keypoints_to_heatmaps(&rel, cube, cfg.sigma_voxels, cfg.heatmap_voxels())?;
    Ok(hm.volume)
}

/// Supervised fine-tuning with attention matching.
///
/// `pretrained` seeds the encoder; the frozen attention reference is a copy
/// of that initial encoder. Scratch training passes `None` (fresh init) and
/// disables the attention term via the ablation switch or lambda = 0.
pub fn finetune(
    cfg: &ModelConfig,
    data: &TrainData,
    pretrained: Option<&Encoder>,
    seed: u64,
    run: Option<&RunDir>,
) -> Result<(Encoder, KeypointHead, Vec<FinetuneRecord>)> {
    cfg.validate()?;
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size)?;
    let cube = Cube::root_relative(cfg.cube_side_mm);
    if data.source.iter().any(|s| s.keypoints.is_none()) {
        return Err(Error::MissingAnnotation(
            "fine-tuning needs source keypoints".into(),
        ));
    }

    let encoder = match pretrained {
        Some(enc) => enc.clone(),
        None => Encoder::init(cfg, &mut seeds::stream(seeds::derive(seed, "init-encoder-ft"))),
    };
    // The attention reference shares architecture and weights with the
    // initial encoder and is never updated.
    let frozen = encoder.clone();
    let lambda = if cfg.ablation.ar { cfg.lambda_attn } else { 0.0 };

    let mut model = EncHead {
        encoder,
        head: KeypointHead::init(
            cfg.embed_dim,
            cfg.grid_side(),
            cfg.joints,
            cfg.head_channels,
            &mut seeds::stream(seeds::derive(seed, "init-head")),
        ),
    };
    let mut opt = Optimizer::new(cfg.finetune.weight_decay);
    let schedule = Schedule::from_stage(&cfg.finetune)?;

    let mut src_sampler = BatchSampler::new(data.source.len(), seeds::derive(seed, "ft-src-order"));
    let mut tgt_sampler = if data.target.is_empty() {
        None
    } else {
        Some(BatchSampler::new(
            data.target.len(),
            seeds::derive(seed, "ft-tgt-order"),
        ))
    };
    let use_attention = lambda > 0.0 && tgt_sampler.is_some();
    // The reference network is frozen and target images are not augmented,
    // so their reference stacks are constants of the run.
    let frozen_stacks: Vec<AttentionStack> = if use_attention {
        let stacks: Result<Vec<AttentionStack>> = data
            .target
            .par_iter()
            .map(|sample| {
                let patches = patchify(&sample.pixels, &spec)?;
                let out = frozen.forward(&patches.view(), None)?;
                Ok(out.stack.expect("full-token mode"))
            })
            .collect();
        stacks?
    } else {
        Vec::new()
    };
    let mut trace = Vec::with_capacity(cfg.finetune.steps);

    for step in 0..cfg.finetune.steps {
        let lr = schedule.lr_at(step)?;
        let batch = cfg.finetune.batch_size;
        let src_idx = src_sampler.next_batch(batch);

        // Source pass: augmented views, encoder over all tokens, head, and
        // the squared-error heatmap objective.
        let views: Result<Vec<ImageSample>> = src_idx
            .par_iter()
            .enumerate()
            .map(|(slot, &idx)| {
                let counter = (step * batch + slot) as u64;
                let mut rng = seeds::stream(seeds::derive_idx(seed, "ft-src", counter));
                standard_augment(&data.source[idx], &cfg.augment, cfg.px_per_mm, &mut rng)
            })
            .collect();
        let views = views?;

        let encoded: Result<Vec<_>> = views
            .par_iter()
            .map(|v| {
                let patches = patchify(&v.pixels, &spec)?;
                model.encoder.forward(&patches.view(), None)
            })
            .collect();
        let encoded = encoded?;
        let tokens_no_cls: Vec<Array2<f64>> = encoded
            .iter()
            .map(|e| e.tokens.slice(ndarray::s![1.., ..]).to_owned())
            .collect();
        let (volumes, head_cache) = model.head.forward_train(&tokens_no_cls)?;

        let targets: Result<Vec<Array4<f64>>> = views
            .par_iter()
            .map(|v| heatmap_target(v, cfg, cube))
            .collect();
        let targets = targets?;

        let per_sample: Vec<(f64, Array4<f64>)> = volumes
            .par_iter()
            .zip(targets.par_iter())
            .map(|(pred, target)| {
                let mut diff_sum = 0.0;
                for (a, b) in pred.iter().zip(target.iter()) {
                    let d = a - b;
                    diff_sum += d * d;
                }
                if cfg.normalize_kpt_loss {
                    diff_sum /= pred.len() as f64;
                }
                (
                    diff_sum / volumes.len() as f64,
                    heatmap_loss_grad(pred, target, cfg.normalize_kpt_loss, volumes.len()),
                )
            })
            .collect();
        let mut kpt_loss = 0.0;
        let mut d_volumes = Vec::with_capacity(volumes.len());
        for (l, d) in per_sample {
            kpt_loss += l;
            d_volumes.push(d);
        }
        let (head_grads, d_tokens) = model.head.backward(&head_cache, &d_volumes);

        let enc_parts: Vec<Encoder> = encoded
            .par_iter()
            .zip(d_tokens.par_iter())
            .map(|(enc, d_tok)| {
                let mut d_full = Array2::zeros(enc.tokens.raw_dim());
                d_full.slice_mut(ndarray::s![1.., ..]).assign(d_tok);
                model.encoder.backward(&enc.cache, &d_full.view(), None)
            })
            .collect();
        let enc_grads = nn::reduce_grads(enc_parts).expect("non-empty batch");
        let src_grads = EncHead {
            encoder: enc_grads,
            head: head_grads,
        };

        let mut attn_loss = 0.0;
        let attn_enc_grads = if use_attention {
            let tgt_idx = tgt_sampler
                .as_mut()
                .unwrap()
                .next_batch(batch * cfg.target_ratio);
            let tgt_parts: Result<Vec<(f64, Encoder)>> = tgt_idx
                .par_iter()
                .map(|&idx| {
                    let sample = &data.target[idx];
                    let patches = patchify(&sample.pixels, &spec)?;
                    let out = model.encoder.forward(&patches.view(), None)?;
                    let stack = out.stack.as_ref().expect("full-token mode");
                    let ref_stack: &AttentionStack = &frozen_stacks[idx];
                    let loss = attention_l1(stack, ref_stack)?;
                    let d_stack = attention_l1_grad(stack, ref_stack, tgt_idx.len());
                    let d_tokens = Array2::zeros(out.tokens.raw_dim());
                    let grads =
                        model
                            .encoder
                            .backward(&out.cache, &d_tokens.view(), Some(&d_stack));
                    Ok((loss / tgt_idx.len() as f64, grads))
                })
                .collect();
            let tgt_parts = tgt_parts?;
            let mut total = 0.0;
            let mut acc: Option<Encoder> = None;
            for (l, g) in tgt_parts {
                total += l;
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => nn::add_assign(a, &g),
                }
            }
            attn_loss = total;
            acc
        } else {
            None
        };

        match cfg.finetune_mode {
            FinetuneMode::Alternating => {
                opt.apply(&mut model, &src_grads, lr)?;
                if let Some(mut enc_g) = attn_enc_grads {
                    nn::scale(&mut enc_g, lambda);
                    let tgt_grads = EncHead {
                        encoder: enc_g,
                        head: model.head.zeros_like(),
                    };
                    opt.apply_skipping_zero(&mut model, &tgt_grads, lr)?;
                }
            }
            FinetuneMode::Combined => {
                let mut combined = src_grads;
                if let Some(mut enc_g) = attn_enc_grads {
                    nn::scale(&mut enc_g, lambda);
                    nn::add_assign(&mut combined.encoder, &enc_g);
                }
                opt.apply(&mut model, &combined, lr)?;
            }
        }
        if !nn::all_finite(&model) {
            return Err(Error::NonFiniteGradient(format!("finetune step {step}")));
        }

        let record = FinetuneRecord {
            step,
            kpt_loss,
            attn_loss,
            total_loss: kpt_loss + lambda * attn_loss,
            lr,
        };
        if let Some(run) = run {
            run.append_metric(&record)?;
        }
        trace.push(record);
    }

    // Frozen reference must be bit-identical to the initial encoder.
    debug_assert!(pretrained.is_none_or(|p| {
        p.entries()
            .iter()
            .zip(frozen.entries())
            .all(|(a, b)| a.view == b.view)
    }));
    Ok((model.encoder, model.head, trace))
}
