//! Central finite-difference checking of every analytic gradient path
//! through the full toy model, in 64-bit floats.
//!
//! The numeric oracle re-evaluates the loss from perturbed parameters; the
//! analytic side comes from the backward passes under test.

use pmud_core::config::ModelConfig;
use pmud_core::data::{AttentionStack, Cube};
use pmud_core::head::KeypointHead;
use pmud_core::heatmap::keypoints_to_heatmaps;
use pmud_core::losses::{
    attention_l1, attention_l1_grad, heatmap_loss_grad, masked_recon_grad, masked_recon_loss,
};
use pmud_core::ndarray::{Array2, Array3, Array4};
use pmud_core::nn::{self, ParamKind, ParamSet};
use pmud_core::patching::{generate_mask, patchify, PatchGridSpec};
use pmud_core::rand::Rng;
use pmud_core::seeds;
use pmud_core::vit::{Decoder, Encoder};
use pmud_core::weighting::patch_weights;

const EPS: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
const LAMBDA: f64 = 10.0;

struct Fixture {
    cfg: ModelConfig,
    encoder: Encoder,
    decoder: Decoder,
    head: KeypointHead,
    patches: Vec<Array2<f64>>,
    masks: Vec<Vec<u8>>,
    weights: Vec<pmud_core::data::PatchWeights>,
    targets: Vec<Array4<f64>>,
    reference_stacks: Vec<AttentionStack>,
}

/// Move parameters to a generic position: conventional init leaves deep
/// paths with gradients below finite-difference resolution, so weights are
/// scaled up and vectors jittered before checking.
fn roughen<P: ParamSet>(params: &mut P, rng: &mut seeds::Stream) {
    for e in params.entries_mut() {
        let mut view = e.view;
        match e.kind {
            ParamKind::Decay => view.mapv_inplace(|v| v * 8.0),
            ParamKind::NoDecay => {
                for v in view.iter_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
            ParamKind::State => {}
        }
    }
}

fn fixture() -> Fixture {
    let cfg = ModelConfig::gradcheck();
    let mut rng = seeds::stream(printable_seed());
    let mut encoder = Encoder::init(&cfg, &mut rng);
    let mut decoder = Decoder::init(&cfg, &mut rng);
    let mut head = KeypointHead::init(
        cfg.embed_dim,
        cfg.grid_side(),
        cfg.joints,
        cfg.head_channels,
        &mut rng,
    );
    roughen(&mut encoder, &mut rng);
    roughen(&mut decoder, &mut rng);
    roughen(&mut head, &mut rng);
    let spec = PatchGridSpec::square(cfg.image_size, cfg.patch_size).unwrap();
    let cube = Cube::root_relative(cfg.cube_side_mm);

    let batch = 2;
    let mut patches = Vec::new();
    let mut masks = Vec::new();
    let mut weights = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..batch {
        let image = Array3::from_shape_fn((cfg.image_size, cfg.image_size, 3), |_| rng.random());
        patches.push(patchify(&image, &spec).unwrap());
        masks.push(generate_mask(cfg.num_patches(), cfg.mask_ratio, &mut rng).unwrap());
        let ratios: Vec<f64> = (0..cfg.num_patches()).map(|_| rng.random()).collect();
        weights.push(patch_weights(&ratios, cfg.alpha).unwrap());
        let kp = Array2::from_shape_fn((cfg.joints, 3), |_| rng.random_range(-150.0..150.0));
        let (hm, _) =
            keypoints_to_heatmaps(&kp, cube, cfg.sigma_voxels, cfg.heatmap_voxels()).unwrap();
        targets.push(hm.volume);
    }

    // An independently initialized network provides the attention reference
    // so the L1 term sits away from its kinks.
    let other = Encoder::init(&cfg, &mut seeds::stream(0x5eed));
    let reference_stacks = patches
        .iter()
        .map(|p| other.forward(&p.view(), None).unwrap().stack.unwrap())
        .collect();

    Fixture {
        cfg,
        encoder,
        decoder,
        head,
        patches,
        masks,
        weights,
        targets,
        reference_stacks,
    }
}

fn printable_seed() -> u64 {
    0xd1ce
}

fn recon_loss(fx: &Fixture, enc: &Encoder, dec: &Decoder) -> f64 {
    let batch = fx.patches.len();
    let mut total = 0.0;
    for i in 0..batch {
        let encoded = enc.forward(&fx.patches[i].view(), Some(&fx.masks[i])).unwrap();
        let (recon, _) = dec.forward(&encoded.tokens.view(), &fx.masks[i]).unwrap();
        total += masked_recon_loss(
            &recon.view(),
            &fx.patches[i].view(),
            &fx.weights[i],
            &fx.masks[i],
        )
        .unwrap();
    }
    total / batch as f64
}

fn recon_grads(fx: &Fixture) -> (Encoder, Decoder) {
    let batch = fx.patches.len();
    let mut enc_acc: Option<Encoder> = None;
    let mut dec_acc: Option<Decoder> = None;
    for i in 0..batch {
        let encoded = fx
            .encoder
            .forward(&fx.patches[i].view(), Some(&fx.masks[i]))
            .unwrap();
        let (recon, cache) = fx
            .decoder
            .forward(&encoded.tokens.view(), &fx.masks[i])
            .unwrap();
        let d_recon = masked_recon_grad(
            &recon.view(),
            &fx.patches[i].view(),
            &fx.weights[i],
            &fx.masks[i],
            batch,
        );
        let (dec_g, d_tokens) = fx.decoder.backward(&cache, &d_recon.view());
        let enc_g = fx.encoder.backward(&encoded.cache, &d_tokens.view(), None);
        match &mut enc_acc {
            None => enc_acc = Some(enc_g),
            Some(a) => nn::add_assign(a, &enc_g),
        }
        match &mut dec_acc {
            None => dec_acc = Some(dec_g),
            Some(a) => nn::add_assign(a, &dec_g),
        }
    }
    (enc_acc.unwrap(), dec_acc.unwrap())
}

fn heatmap_objective(fx: &Fixture, enc: &Encoder, head: &KeypointHead) -> f64 {
    let batch = fx.patches.len();
    let tokens: Vec<Array2<f64>> = fx
        .patches
        .iter()
        .map(|p| {
            let out = enc.forward(&p.view(), None).unwrap();
            out.tokens.slice(pmud_core::ndarray::s![1.., ..]).to_owned()
        })
        .collect();
    let mut head = head.clone();
    let (volumes, _) = head.forward_train(&tokens).unwrap();
    let mut total = 0.0;
    for (pred, target) in volumes.iter().zip(&fx.targets) {
        let mut sum = 0.0;
        for (a, b) in pred.iter().zip(target.iter()) {
            let d = a - b;
            sum += d * d;
        }
        if fx.cfg.normalize_kpt_loss {
            sum /= pred.len() as f64;
        }
        total += sum;
    }
    total / batch as f64
}

fn heatmap_grads(fx: &Fixture) -> (Encoder, KeypointHead) {
    let batch = fx.patches.len();
    let encoded: Vec<_> = fx
        .patches
        .iter()
        .map(|p| fx.encoder.forward(&p.view(), None).unwrap())
        .collect();
    let tokens: Vec<Array2<f64>> = encoded
        .iter()
        .map(|e| e.tokens.slice(pmud_core::ndarray::s![1.., ..]).to_owned())
        .collect();
    let mut head = fx.head.clone();
    let (volumes, cache) = head.forward_train(&tokens).unwrap();
    let d_volumes: Vec<Array4<f64>> = volumes
        .iter()
        .zip(&fx.targets)
        .map(|(p, t)| heatmap_loss_grad(p, t, fx.cfg.normalize_kpt_loss, batch))
        .collect();
    let (head_grads, d_tokens) = fx.head.backward(&cache, &d_volumes);
    let mut enc_acc: Option<Encoder> = None;
    for (e, d_tok) in encoded.iter().zip(&d_tokens) {
        let mut d_full = Array2::zeros(e.tokens.raw_dim());
        d_full
            .slice_mut(pmud_core::ndarray::s![1.., ..])
            .assign(d_tok);
        let g = fx.encoder.backward(&e.cache, &d_full.view(), None);
        match &mut enc_acc {
            None => enc_acc = Some(g),
            Some(a) => nn::add_assign(a, &g),
        }
    }
    (enc_acc.unwrap(), head_grads)
}

fn attention_objective(fx: &Fixture, enc: &Encoder) -> f64 {
    let batch = fx.patches.len();
    let mut total = 0.0;
    for (p, reference) in fx.patches.iter().zip(&fx.reference_stacks) {
        let out = enc.forward(&p.view(), None).unwrap();
        total += attention_l1(out.stack.as_ref().unwrap(), reference).unwrap();
    }
    total / batch as f64
}

fn attention_grads(fx: &Fixture) -> Encoder {
    let batch = fx.patches.len();
    let mut acc: Option<Encoder> = None;
    for (p, reference) in fx.patches.iter().zip(&fx.reference_stacks) {
        let out = fx.encoder.forward(&p.view(), None).unwrap();
        let d_stack = attention_l1_grad(out.stack.as_ref().unwrap(), reference, batch);
        let d_tokens = Array2::zeros(out.tokens.raw_dim());
        let g = fx
            .encoder
            .backward(&out.cache, &d_tokens.view(), Some(&d_stack));
        match &mut acc {
            None => acc = Some(g),
            Some(a) => nn::add_assign(a, &g),
        }
    }
    acc.unwrap()
}

/// Sampled entry offsets for a tensor of `len` scalars.
fn probe_offsets(len: usize) -> Vec<usize> {
    let mut out = vec![0];
    if len > 2 {
        out.push(len / 2);
    }
    if len > 1 {
        out.push(len - 1);
    }
    out.dedup();
    out
}

/// Compare analytic gradients against central finite differences for every
/// trainable tensor of `params`, evaluating `loss` on perturbed clones.
fn check_params<P: ParamSet + Clone>(
    label: &str,
    params: &P,
    grads: &P,
    mut loss: impl FnMut(&P) -> f64,
    worst: &mut f64,
) {
    let grad_entries = grads.entries();
    for (t, g) in grad_entries.iter().enumerate() {
        if g.kind == ParamKind::State {
            continue;
        }
        let len = g.view.len();
        for &offset in &probe_offsets(len) {
            let mut eval = |delta: f64| -> f64 {
                let mut p = params.clone();
                {
                    let mut entries = p.entries_mut();
                    let view = &mut entries[t].view;
                    let slice = view.as_slice_mut().expect("owned tensors");
                    slice[offset] += delta;
                }
                loss(&p)
            };
            let fd = (eval(EPS) - eval(-EPS)) / (2.0 * EPS);
            let an = g.view.as_slice().expect("owned tensors")[offset];
            // The floor keeps finite-difference noise (~1e-9 absolute at
            // eps = 1e-5) from spoiling entries whose true gradient is zero,
            // e.g. key biases, which cancel exactly in the softmax.
            let denom = fd.abs().max(an.abs()).max(2e-4);
            let rel = (fd - an).abs() / denom;
            assert!(
                rel < TOLERANCE,
                "{label}: tensor {} offset {offset}: analytic {an:.6e} vs fd {fd:.6e} (rel {rel:.2e})",
                g.name
            );
            if rel > *worst {
                *worst = rel;
            }
        }
    }
}

/// Run the full suite. Returns the worst relative error observed.
pub fn run_full_suite() -> f64 {
    let fx = fixture();
    let mut worst = 0.0f64;

    // Reconstruction loss: encoder and decoder parameters.
    let (enc_g, dec_g) = recon_grads(&fx);
    check_params(
        "recon/encoder",
        &fx.encoder,
        &enc_g,
        |e| recon_loss(&fx, e, &fx.decoder),
        &mut worst,
    );
    check_params(
        "recon/decoder",
        &fx.decoder,
        &dec_g,
        |d| recon_loss(&fx, &fx.encoder, d),
        &mut worst,
    );

    // Heatmap loss: encoder and head parameters.
    let (enc_g, head_g) = heatmap_grads(&fx);
    check_params(
        "heatmap/encoder",
        &fx.encoder,
        &enc_g,
        |e| heatmap_objective(&fx, e, &fx.head),
        &mut worst,
    );
    check_params(
        "heatmap/head",
        &fx.head,
        &head_g,
        |h| heatmap_objective(&fx, &fx.encoder, h),
        &mut worst,
    );

    // Attention term: encoder parameters only.
    let attn_g = attention_grads(&fx);
    check_params(
        "attention/encoder",
        &fx.encoder,
        &attn_g,
        |e| attention_objective(&fx, e),
        &mut worst,
    );

    // Combined objective: kpt + lambda * attention on the shared encoder.
    let (kpt_enc_g, _) = heatmap_grads(&fx);
    let mut combined_enc = kpt_enc_g;
    let mut attn_scaled = attention_grads(&fx);
    nn::scale(&mut attn_scaled, LAMBDA);
    nn::add_assign(&mut combined_enc, &attn_scaled);
    check_params(
        "combined/encoder",
        &fx.encoder,
        &combined_enc,
        |e| heatmap_objective(&fx, e, &fx.head) + LAMBDA * attention_objective(&fx, e),
        &mut worst,
    );

    worst
}
