//! Probe: does the pretrained encoder catch up with longer fine-tuning?

use pmud_core::config::{ModelConfig, TargetMaskSource};
use pmud_core::pipeline::{self, Variant};
use std::time::Instant;

fn main() {
    let root = std::path::PathBuf::from("/tmp/pilot_3");
    let mut cfg = ModelConfig::toy();
    cfg.ablation.target_masks = TargetMaskSource::Oracle;
    let prepared = pipeline::prepare(&cfg, &root, 3).unwrap();

    for (label, steps, variant) in [
        ("scratch-400", 400usize, Variant::Scratch),
        ("mae-400", 400, Variant::WithoutBoth),
        ("mae-1000", 1000, Variant::WithoutBoth),
    ] {
        let mut c = cfg.clone();
        c.finetune.steps = steps;
        let t = Instant::now();
        let out = pipeline::run_variant(&c, variant, &prepared, 3, None).unwrap();
        println!(
            "{label:<12} EPE {:>7.2}  MPJPE {:>7.2}  PA {:>6.2}  fg-attn {:.3} ({:.0}s; ft kpt -> {:.5})",
            out.eval.summary.epe_mm,
            out.eval.summary.mpjpe_mm,
            out.eval.summary.pa_mpjpe_mm,
            out.fg_attention_mass,
            t.elapsed().as_secs_f64(),
            out.finetune_trace.last().map(|r| r.kpt_loss).unwrap_or(f64::NAN),
        );
    }
}
