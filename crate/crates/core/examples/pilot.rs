//! One-seed pilot of the cross-domain experiment, for calibration.

use pmud_core::config::ModelConfig;
use pmud_core::pipeline::{self, Variant};
use pmud_core::synth::{generate_dataset, GenConfig, GenCounts};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let root = std::path::PathBuf::from(format!("/tmp/pilot_{seed}"));
    let cfg = ModelConfig::toy();

    let gen = GenConfig::toy(GenCounts {
        train_source: 128,
        train_target: 192,
        train_unconstrained: 64,
        test_source: 48,
        test_target: 96,
    });
    if !root.exists() {
        let t = Instant::now();
        generate_dataset(&gen, &root, seed).unwrap();
        println!("gen: {:.1}s", t.elapsed().as_secs_f64());
    }

    let t = Instant::now();
    let prepared = pipeline::prepare(&cfg, &root, seed).unwrap();
    println!(
        "prepare: {:.1}s  seg IoU source {:.3} target {:.3}",
        t.elapsed().as_secs_f64(),
        prepared.seg_iou_source.unwrap(),
        prepared.seg_iou_target.unwrap()
    );

    for v in [Variant::Scratch, Variant::WithoutBoth, Variant::Full, Variant::WithoutTargetMasks] {
        let t = Instant::now();
        let out = pipeline::run_variant(&cfg, v, &prepared, seed, None).unwrap();
        println!(
            "{:<16} EPE {:>7.2}  MPJPE {:>7.2}  PA {:>6.2}  fg-attn {:.3}  ({:.0}s; pt loss {} -> {}; ft kpt {:.4} -> {:.4}, attn {:.4})",
            v.label(),
            out.eval.summary.epe_mm,
            out.eval.summary.mpjpe_mm,
            out.eval.summary.pa_mpjpe_mm,
            out.fg_attention_mass,
            t.elapsed().as_secs_f64(),
            out.pretrain_trace.first().map(|r| format!("{:.3}", r.loss)).unwrap_or_default(),
            out.pretrain_trace.last().map(|r| format!("{:.3}", r.loss)).unwrap_or_default(),
            out.finetune_trace.first().map(|r| r.kpt_loss).unwrap_or(f64::NAN),
            out.finetune_trace.last().map(|r| r.kpt_loss).unwrap_or(f64::NAN),
            out.finetune_trace.last().map(|r| r.attn_loss).unwrap_or(f64::NAN),
        );
    }
}
