//! Foreground segmentation network: a small U-shaped encoder-decoder with
//! skip connections and a sigmoid output, trained on source images and masks
//! with pixelwise binary cross-entropy.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;

use crate::config::SegmenterConfig;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::nn::conv::{
    conv2d, conv2d_backward, maxpool2, maxpool2_backward, relu, relu_backward, upsample2,
    upsample2_backward,
};
use crate::nn::{ParamKind, ParamMut, ParamRef, ParamSet};
use crate::optim::{Optimizer, Schedule};
use crate::seeds::{self, normal, Stream};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: Array4<f64>,
    pub bias: Array1<f64>,
}

impl ConvLayer {
    fn init(kh: usize, cin: usize, cout: usize, rng: &mut Stream) -> Self {
        let fan_in = (kh * kh * cin) as f64;
        let std = (2.0 / fan_in).sqrt();
        ConvLayer {
            kernel: Array4::from_shape_fn((kh, kh, cin, cout), |_| normal(rng) * std),
            bias: Array1::zeros(cout),
        }
    }

    fn zeros_like(&self) -> Self {
        ConvLayer {
            kernel: Array4::zeros(self.kernel.raw_dim()),
            bias: Array1::zeros(self.bias.len()),
        }
    }
}

/// U-shaped segmentation network. `levels` resolutions, fixed width.
#[derive(Clone, Debug)]
pub struct Segmenter {
    /// Two convolutions per resolution on the way down (last = bottleneck).
    pub down: Vec<[ConvLayer; 2]>,
    /// Two convolutions per resolution on the way up, after skip concat.
    pub up: Vec<[ConvLayer; 2]>,
    pub final_conv: ConvLayer,
    pub levels: usize,
}

impl Segmenter {
    pub fn init(cfg: &SegmenterConfig, rng: &mut Stream) -> Self {
        let c = cfg.channels;
        let mut down = Vec::new();
        for i in 0..cfg.levels {
            let cin = if i == 0 { 3 } else { c };
            down.push([ConvLayer::init(3, cin, c, rng), ConvLayer::init(3, c, c, rng)]);
        }
        let mut up = Vec::new();
        for _ in 0..cfg.levels - 1 {
            up.push([
                ConvLayer::init(3, 2 * c, c, rng),
                ConvLayer::init(3, c, c, rng),
            ]);
        }
        Segmenter {
            down,
            up,
            final_conv: ConvLayer::init(1, c, 1, rng),
            levels: cfg.levels,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Segmenter {
            down: self
                .down
                .iter()
                .map(|[a, b]| [a.zeros_like(), b.zeros_like()])
                .collect(),
            up: self
                .up
                .iter()
                .map(|[a, b]| [a.zeros_like(), b.zeros_like()])
                .collect(),
            final_conv: self.final_conv.zeros_like(),
            levels: self.levels,
        }
    }
}

impl ParamSet for Segmenter {
    fn entries(&self) -> Vec<ParamRef<'_>> {
        let mut out = Vec::new();
        for (i, [a, b]) in self.down.iter().enumerate() {
            out.push(ParamRef { name: format!("seg.down{i}a_k"), view: a.kernel.view().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamRef { name: format!("seg.down{i}a_b"), view: a.bias.view().into_dyn(), kind: ParamKind::NoDecay });
            out.push(ParamRef { name: format!("seg.down{i}b_k"), view: b.kernel.view().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamRef { name: format!("seg.down{i}b_b"), view: b.bias.view().into_dyn(), kind: ParamKind::NoDecay });
        }
        for (i, [a, b]) in self.up.iter().enumerate() {
            out.push(ParamRef { name: format!("seg.up{i}a_k"), view: a.kernel.view().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamRef { name: format!("seg.up{i}a_b"), view: a.bias.view().into_dyn(), kind: ParamKind::NoDecay });
            out.push(ParamRef { name: format!("seg.up{i}b_k"), view: b.kernel.view().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamRef { name: format!("seg.up{i}b_b"), view: b.bias.view().into_dyn(), kind: ParamKind::NoDecay });
        }
        out.push(ParamRef { name: "seg.final_k".into(), view: self.final_conv.kernel.view().into_dyn(), kind: ParamKind::Decay });
        out.push(ParamRef { name: "seg.final_b".into(), view: self.final_conv.bias.view().into_dyn(), kind: ParamKind::NoDecay });
        out
    }

    fn entries_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::new();
        for (i, [a, b]) in self.down.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("seg.down{i}a_k"), view: a.kernel.view_mut().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamMut { name: format!("seg.down{i}a_b"), view: a.bias.view_mut().into_dyn(), kind: ParamKind::NoDecay });
            out.push(ParamMut { name: format!("seg.down{i}b_k"), view: b.kernel.view_mut().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamMut { name: format!("seg.down{i}b_b"), view: b.bias.view_mut().into_dyn(), kind: ParamKind::NoDecay });
        }
        for (i, [a, b]) in self.up.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("seg.up{i}a_k"), view: a.kernel.view_mut().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamMut { name: format!("seg.up{i}a_b"), view: a.bias.view_mut().into_dyn(), kind: ParamKind::NoDecay });
            out.push(ParamMut { name: format!("seg.up{i}b_k"), view: b.kernel.view_mut().into_dyn(), kind: ParamKind::Decay });
            out.push(ParamMut { name: format!("seg.up{i}b_b"), view: b.bias.view_mut().into_dyn(), kind: ParamKind::NoDecay });
        }
        out.push(ParamMut { name: "seg.final_k".into(), view: self.final_conv.kernel.view_mut().into_dyn(), kind: ParamKind::Decay });
        out.push(ParamMut { name: "seg.final_b".into(), view: self.final_conv.bias.view_mut().into_dyn(), kind: ParamKind::NoDecay });
        out
    }
}

struct ConvStep {
    input: Array4<f64>,
    pre: Array4<f64>,
}

pub struct SegCache {
    down_steps: Vec<[ConvStep; 2]>,
    pool_args: Vec<Array4<u8>>,
    pool_in_dims: Vec<(usize, usize)>,
    up_steps: Vec<[ConvStep; 2]>,
    concat_channels: usize,
    final_input: Array4<f64>,
}

impl Segmenter {
    fn run(&self, images: &Array4<f64>) -> Result<(Array4<f64>, SegCache)> {
        let (_, h, w, _) = {
            let s = images.shape();
            (s[0], s[1], s[2], s[3])
        };
        let div = 1 << self.levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::InvalidShape(format!(
                "image {h}x{w} must be a multiple of 2^levels = {div}"
            )));
        }
        let mut x = images.clone();
        let mut skips: Vec<Array4<f64>> = Vec::new();
        let mut down_steps = Vec::new();
        let mut pool_args = Vec::new();
        let mut pool_in_dims = Vec::new();
        for (i, [a, b]) in self.down.iter().enumerate() {
            let pre_a = conv2d(&x, &a.kernel, &a.bias, 1);
            let act_a = relu(&pre_a);
            let step_a = ConvStep { input: x, pre: pre_a };
            let pre_b = conv2d(&act_a, &b.kernel, &b.bias, 1);
            let act_b = relu(&pre_b);
            let step_b = ConvStep { input: act_a, pre: pre_b };
            down_steps.push([step_a, step_b]);
            if i + 1 < self.levels {
                skips.push(act_b.clone());
                let dims = (act_b.shape()[1], act_b.shape()[2]);
                let (pooled, arg) = maxpool2(&act_b);
                pool_args.push(arg);
                pool_in_dims.push(dims);
                x = pooled;
            } else {
                x = act_b;
            }
        }

        let mut up_steps = Vec::new();
        let c = self.down[0][0].kernel.shape()[3];
        for (i, [a, b]) in self.up.iter().enumerate() {
            let upsampled = upsample2(&x);
            let skip = &skips[self.levels - 2 - i];
            let concat = concat_channels_lastdim(skip, &upsampled);
            let pre_a = conv2d(&concat, &a.kernel, &a.bias, 1);
            let act_a = relu(&pre_a);
            let step_a = ConvStep { input: concat, pre: pre_a };
            let pre_b = conv2d(&act_a, &b.kernel, &b.bias, 1);
            let act_b = relu(&pre_b);
            let step_b = ConvStep { input: act_a, pre: pre_b };
            up_steps.push([step_a, step_b]);
            x = act_b;
        }

        let logits = conv2d(&x, &self.final_conv.kernel, &self.final_conv.bias, 0);
        let probs = logits.mapv(|z| 1.0 / (1.0 + (-z).exp()));
        Ok((
            probs,
            SegCache {
                down_steps,
                pool_args,
                pool_in_dims,
                up_steps,
                concat_channels: c,
                final_input: x,
            },
        ))
    }

    /// Predict a soft foreground mask for one image. Strictly inside (0,1).
    pub fn segment(&self, image: &Array3<f64>) -> Result<Array2<f64>> {
        let batch = image.clone().insert_axis(Axis(0));
        let (probs, _) = self.run(&batch)?;
        let (h, w) = (probs.shape()[1], probs.shape()[2]);
        Ok(Array2::from_shape_fn((h, w), |(y, x)| probs[[0, y, x, 0]]))
    }

    /// Backward of the pixelwise BCE loss from the logit gradient.
    fn backward(&self, cache: &SegCache, d_logits: &Array4<f64>) -> Segmenter {
        let mut grads = self.zeros_like();
        let (mut dx, dk, db) =
            conv2d_backward(&cache.final_input, &self.final_conv.kernel, d_logits, 0);
        grads.final_conv.kernel = dk;
        grads.final_conv.bias = db;

        let mut d_skips: Vec<Option<Array4<f64>>> = vec![None; self.levels - 1];
        for (i, [a, b]) in self.up.iter().enumerate().rev() {
            let steps = &cache.up_steps[i];
            let d_pre_b = relu_backward(&steps[1].pre, &dx);
            let (d_act_a, dkb, dbb) = conv2d_backward(&steps[1].input, &b.kernel, &d_pre_b, 1);
            grads.up[i][1].kernel = dkb;
            grads.up[i][1].bias = dbb;
            let d_pre_a = relu_backward(&steps[0].pre, &d_act_a);
            let (d_concat, dka, dba) = conv2d_backward(&steps[0].input, &a.kernel, &d_pre_a, 1);
            grads.up[i][0].kernel = dka;
            grads.up[i][0].bias = dba;
            let c = cache.concat_channels;
            let (d_skip, d_upsampled) = split_channels_lastdim(&d_concat, c);
            d_skips[self.levels - 2 - i] = Some(d_skip);
            dx = upsample2_backward(&d_upsampled);
        }

        for (i, [a, b]) in self.down.iter().enumerate().rev() {
            if i + 1 < self.levels {
                let (h, w) = cache.pool_in_dims[i];
                let mut d_act = maxpool2_backward(&dx, &cache.pool_args[i], h, w);
                if let Some(ds) = &d_skips[i] {
                    d_act += ds;
                }
                dx = d_act;
            }
            let steps = &cache.down_steps[i];
            let d_pre_b = relu_backward(&steps[1].pre, &dx);
            let (d_act_a, dkb, dbb) = conv2d_backward(&steps[1].input, &b.kernel, &d_pre_b, 1);
            grads.down[i][1].kernel = dkb;
            grads.down[i][1].bias = dbb;
            let d_pre_a = relu_backward(&steps[0].pre, &d_act_a);
            let (d_input, dka, dba) = conv2d_backward(&steps[0].input, &a.kernel, &d_pre_a, 1);
            grads.down[i][0].kernel = dka;
            grads.down[i][0].bias = dba;
            dx = d_input;
        }
        grads
    }
}

fn concat_channels_lastdim(a: &Array4<f64>, b: &Array4<f64>) -> Array4<f64> {
    // concatenate can hand back fortran-ordered memory; the conv kernels
    // want standard layout.
    ndarray::concatenate(Axis(3), &[a.view(), b.view()])
        .unwrap()
        .as_standard_layout()
        .into_owned()
}

fn split_channels_lastdim(x: &Array4<f64>, first: usize) -> (Array4<f64>, Array4<f64>) {
    let a = x.slice(ndarray::s![.., .., .., ..first]).to_owned();
    let b = x.slice(ndarray::s![.., .., .., first..]).to_owned();
    (a, b)
}

/// Mean pixelwise binary cross-entropy of probabilities against targets.
pub fn bce_loss(probs: &Array4<f64>, targets: &Array4<f64>) -> f64 {
    let eps = 1e-12;
    let mut total = 0.0;
    for (&p, &t) in probs.iter().zip(targets.iter()) {
        let p = p.clamp(eps, 1.0 - eps);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    total / probs.len() as f64
}

/// Threshold a soft mask; values at exactly the threshold count as
/// foreground.
pub fn binarize(soft: &Array2<f64>, threshold: f64) -> Array2<f64> {
    soft.mapv(|v| if v >= threshold { 1.0 } else { 0.0 })
}

/// Intersection-over-union of two binary masks at the 0.5 threshold.
pub fn mask_iou(pred_soft: &Array2<f64>, gt: &Array2<f64>) -> f64 {
    let pred = binarize(pred_soft, 0.5);
    let gtb = binarize(gt, 0.5);
    let mut inter = 0.0;
    let mut union = 0.0;
    for (&p, &g) in pred.iter().zip(gtb.iter()) {
        if p > 0.5 && g > 0.5 {
            inter += 1.0;
        }
        if p > 0.5 || g > 0.5 {
            union += 1.0;
        }
    }
    if union == 0.0 {
        1.0
    } else {
        inter / union
    }
}

/// Per-step record emitted by [`train_segmenter`].
#[derive(Clone, Debug, serde::Serialize)]
pub struct SegTrainRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub val_loss: Option<f64>,
}

/// Train the segmentation network on source samples with masks, holding out
/// a validation fraction for model selection. Returns the best-validation
/// parameters and the training trace.
pub fn train_segmenter(
    samples: &[ImageSample],
    cfg: &SegmenterConfig,
    seed: u64,
) -> Result<(Segmenter, Vec<SegTrainRecord>)> {
    for s in samples {
        if s.mask.is_none() {
            return Err(Error::MissingAnnotation(format!(
                "sample {} has no mask",
                s.sample_id
            )));
        }
    }
    if samples.is_empty() {
        return Err(Error::MissingAnnotation("empty training set".into()));
    }

    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut seeds::stream(seeds::derive(seed, "seg-split")));
    let n_val = ((samples.len() as f64) * cfg.val_frac).ceil() as usize;
    let n_val = n_val.clamp(1, samples.len().saturating_sub(1).max(1));
    let (val_idx, train_idx) = order.split_at(n_val);

    let mut net = Segmenter::init(cfg, &mut seeds::stream(seeds::derive(seed, "seg-init")));
    let mut opt = Optimizer::new(cfg.stage.weight_decay);
    let schedule = Schedule::from_stage(&cfg.stage)?;
    let mut best = net.clone();
    let mut best_val = f64::INFINITY;
    let mut trace = Vec::new();

    let make_batch = |idx: &[usize]| -> (Array4<f64>, Array4<f64>) {
        let h = samples[idx[0]].height();
        let w = samples[idx[0]].width();
        let mut images = Array4::zeros((idx.len(), h, w, 3));
        let mut masks = Array4::zeros((idx.len(), h, w, 1));
        for (bi, &si) in idx.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), bi)
                .assign(&samples[si].pixels);
            let m = samples[si].mask.as_ref().unwrap();
            for y in 0..h {
                for x in 0..w {
                    masks[[bi, y, x, 0]] = m[[y, x]];
                }
            }
        }
        (images, masks)
    };

    let mut batch_rng = seeds::stream(seeds::derive(seed, "seg-batches"));
    let mut pool: Vec<usize> = Vec::new();
    let val_every = (cfg.stage.steps / 20).max(1);
    for step in 0..cfg.stage.steps {
        if pool.len() < cfg.stage.batch_size {
            let mut epoch: Vec<usize> = train_idx.to_vec();
            epoch.shuffle(&mut batch_rng);
            pool.extend(epoch);
        }
        let batch_idx: Vec<usize> = pool.drain(..cfg.stage.batch_size.min(pool.len())).collect();
        let (images, masks) = make_batch(&batch_idx);
        let (probs, cache) = net.run(&images)?;
        let loss = bce_loss(&probs, &masks);
        // Combined sigmoid+BCE gradient on the logits.
        let count = probs.len() as f64;
        let mut d_logits = &probs - &masks;
        d_logits.mapv_inplace(|v| v / count);
        let grads = net.backward(&cache, &d_logits);
        let lr = schedule.lr_at(step)?;
        opt.apply(&mut net, &grads, lr)?;

        let val_loss = if step % val_every == 0 || step + 1 == cfg.stage.steps {
            let (vi, vm) = make_batch(val_idx);
            let (vp, _) = net.run(&vi)?;
            let vl = bce_loss(&vp, &vm);
            if vl < best_val {
                best_val = vl;
                best = net.clone();
            }
            Some(vl)
        } else {
            None
        };
        trace.push(SegTrainRecord {
            step,
            loss,
            lr,
            val_loss,
        });
    }
    Ok((best, trace))
}
