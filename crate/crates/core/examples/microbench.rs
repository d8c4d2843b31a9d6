use pmud_core::config::ModelConfig;
use pmud_core::rand::Rng;
use pmud_core::seeds;
use pmud_core::vit::{block_forward, class_attention, Encoder};
use pmud_core::nn::ops::linear;
use pmud_core::patching::{patchify, PatchGridSpec};
use pmud_core::ndarray::{Array2, Array3};
use std::time::Instant;

fn main() {
    let cfg = ModelConfig::toy();
    let mut rng = seeds::stream(1);
    let enc = Encoder::init(&cfg, &mut rng);
    let spec = PatchGridSpec::square(64, 8).unwrap();
    let img = Array3::from_shape_fn((64, 64, 3), |_| rng.random::<f64>());
    let patches = patchify(&img, &spec).unwrap();
    let iters = 200;

    // Manual reimplementation of forward stages with timers.
    let t0 = Instant::now();
    for _ in 0..iters {
        let embedded = linear(&patches.view(), &enc.patch_embed, &enc.patch_bias);
        std::hint::black_box(embedded);
    }
    println!("embed: {:.0} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);

    let embedded = linear(&patches.view(), &enc.patch_embed, &enc.patch_bias);
    let mut tokens = Array2::<f64>::zeros((65, 64));
    for (j, v) in enc.cls_token.iter().enumerate() {
        tokens[[0, j]] = v + enc.pos_embed[[0, j]];
    }
    for row in 0..64 {
        for j in 0..64 {
            tokens[[row + 1, j]] = embedded[[row, j]] + enc.pos_embed[[row + 1, j]];
        }
    }

    let t0 = Instant::now();
    for _ in 0..iters {
        let mut caches = Vec::with_capacity(4);
        let mut cur = tokens.clone();
        for b in &enc.blocks {
            let (next, cache) = block_forward(b, &cur.view(), 4).unwrap();
            caches.push(cache);
            cur = next;
        }
        std::hint::black_box(&caches);
    }
    println!("blocks+caches: {:.0} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);

    let mut caches = Vec::new();
    let mut cur = tokens.clone();
    for b in &enc.blocks {
        let (next, cache) = block_forward(b, &cur.view(), 4).unwrap();
        caches.push(cache);
        cur = next;
    }
    let t0 = Instant::now();
    for _ in 0..iters {
        let per_block: Vec<Array3<f64>> = caches.iter().map(|c| c.probs.clone()).collect();
        let s = class_attention(&per_block, Some(64)).unwrap();
        std::hint::black_box(s);
    }
    println!("stack extraction: {:.0} us", t0.elapsed().as_secs_f64() / iters as f64 * 1e6);
}
