//! Command-line driver for the domain-adaptation pipeline.
//!
//! Subcommands: `gen-data`, `train-seg`, `pretrain`, `finetune`, `eval`,
//! `probe-attn`, `ablate`. Exit codes: 0 on success, 2 for usage problems
//! (including an unreadable config path), 1 otherwise with a one-line
//! diagnostic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use pmud_core::checkpoint::{self, ParamBundle};
use pmud_core::config::ModelConfig;
use pmud_core::data::Domain;
use pmud_core::dataset::{self, MaskChoice, Split};
use pmud_core::eval::{evaluate, probe_attention};
use pmud_core::head::KeypointHead;
use pmud_core::pipeline::{self, Variant};
use pmud_core::runs::RunDir;
use pmud_core::segmenter::train_segmenter;
use pmud_core::synth::{generate_dataset, GenConfig, GenCounts};
use pmud_core::train::{finetune, pretrain};
use pmud_core::vit::Encoder;
use pmud_core::{seeds, Error};

#[derive(Parser)]
#[command(name = "pmud", version, about = "Masked-pretraining domain adaptation for 3D pose estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Profile {
    Toy,
    Paper,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Base configuration profile.
    #[arg(long, value_enum, default_value = "toy")]
    profile: Profile,
    /// JSON config file; keys override the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for all derived randomness.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Masking ratio override.
    #[arg(long)]
    mask_ratio: Option<f64>,
    /// Foreground-weighting sharpness override.
    #[arg(long)]
    alpha: Option<f64>,
    /// Attention-term weight override.
    #[arg(long)]
    lambda_attn: Option<f64>,
    /// Pre-training step count override.
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Fine-tuning step count override.
    #[arg(long)]
    finetune_steps: Option<usize>,
}

impl ConfigArgs {
    /// Profile defaults, overlaid with the config file, overlaid with flags.
    fn resolve(&self) -> anyhow::Result<ModelConfig> {
        let base = match self.profile {
            Profile::Toy => ModelConfig::toy(),
            Profile::Paper => ModelConfig::paper(),
        };
        let mut value = serde_json::to_value(&base).expect("config serializes");
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
            let overlay: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| UsageError(format!("bad config {}: {e}", path.display())))?;
            merge(&mut value, overlay);
        }
        let mut cfg: ModelConfig =
            serde_json::from_value(value).map_err(|e| UsageError(format!("bad config: {e}")))?;
        if let Some(r) = self.mask_ratio {
            cfg.mask_ratio = r;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(l) = self.lambda_attn {
            cfg.lambda_attn = l;
        }
        if let Some(s) = self.pretrain_steps {
            cfg.pretrain.steps = s;
        }
        if let Some(s) = self.finetune_steps {
            cfg.finetune.steps = s;
        }
        cfg.validate().context("invalid configuration")?;
        Ok(cfg)
    }
}

/// Problems that exit with status 2 (bad invocation rather than failure).
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn merge(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cross-domain dataset.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root to create.
        #[arg(long)]
        out: PathBuf,
        /// Generator config JSON (full GenConfig; optional).
        #[arg(long)]
        gen_config: Option<PathBuf>,
        /// Samples per training domain.
        #[arg(long, default_value_t = 384)]
        train_count: usize,
        /// Samples per test domain.
        #[arg(long, default_value_t = 96)]
        test_count: usize,
        /// Unconstrained background images.
        #[arg(long, default_value_t = 96)]
        unconstrained_count: usize,
    },
    /// Train the foreground segmentation network on source and materialize
    /// predicted target masks.
    TrainSeg {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset root.
        #[arg(long)]
        data: PathBuf,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Masked-reconstruction pre-training of encoder and decoder.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning with attention matching.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Pre-training checkpoint; omit to train from scratch.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Emit class-attention overlays for a dataset split.
    ProbeAttn {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "target")]
        domain: String,
    },
    /// Run the ablation grid and emit a comparison table.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated variant labels; default is the design-choice grid.
        #[arg(long)]
        variants: Option<String>,
    },
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => bail!(UsageError(format!("unknown split {other}"))),
    }
}

fn parse_domain(s: &str) -> anyhow::Result<Domain> {
    match s {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        "unconstrained" => Ok(Domain::Unconstrained),
        other => bail!(UsageError(format!("unknown domain {other}"))),
    }
}

fn parse_variant(s: &str) -> anyhow::Result<Variant> {
    Variant::ALL
        .iter()
        .find(|v| v.label() == s)
        .copied()
        .ok_or_else(|| UsageError(format!("unknown variant {s}")).into())
}

fn load_finetuned(path: &Path, cfg: &ModelConfig) -> anyhow::Result<(Encoder, KeypointHead)> {
    let bundle = checkpoint::load(path)?;
    let mut encoder = Encoder::init(cfg, &mut seeds::stream(0));
    bundle.load_into(&mut encoder)?;
    let mut head = KeypointHead::init(
        cfg.embed_dim,
        cfg.grid_side(),
        cfg.joints,
        cfg.head_channels,
        &mut seeds::stream(0),
    );
    bundle.load_into(&mut head)?;
    Ok((encoder, head))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData {
            cfg,
            out,
            gen_config,
            train_count,
            test_count,
            unconstrained_count,
        } => {
            let _ = cfg.resolve()?; // validate early; image sizes come from GenConfig
            let counts = GenCounts {
                train_source: train_count,
                train_target: train_count,
                train_unconstrained: unconstrained_count,
                test_source: test_count,
                test_target: test_count,
            };
            let gen_cfg = match gen_config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| {
                        UsageError(format!("cannot read gen config {}: {e}", path.display()))
                    })?;
                    serde_json::from_str::<GenConfig>(&text)
                        .map_err(|e| UsageError(format!("bad gen config: {e}")))?
                }
                None => GenConfig::toy(counts),
            };
            generate_dataset(&gen_cfg, &out, cfg.seed)?;
            let echo = out.join("gen_config.json");
            std::fs::write(&echo, serde_json::to_string_pretty(&gen_cfg)?)?;
            println!(
                "dataset written to {} (train {}+{}, test {}+{}, unconstrained {})",
                out.display(),
                gen_cfg.counts.train_source,
                gen_cfg.counts.train_target,
                gen_cfg.counts.test_source,
                gen_cfg.counts.test_target,
                gen_cfg.counts.train_unconstrained
            );
            Ok(())
        }
        Command::TrainSeg { cfg, data, out } => {
            let config = cfg.resolve()?;
            let run = RunDir::create(&out, &config, cfg.seed)?;
            let (source, _) =
                dataset::read_domain(&data, Split::Train, Domain::Source, MaskChoice::GroundTruth)?;
            let (net, trace) = train_segmenter(
                &source,
                &config.segmenter,
                seeds::derive(cfg.seed, "segmenter"),
            )?;
            for record in &trace {
                run.append_metric(record)?;
            }
            checkpoint::save(&ParamBundle::from_params(&net), &run.path("segmenter.ckpt"))?;

            // Materialize predicted target masks into the dataset tree.
            let (targets, _) =
                dataset::read_domain(&data, Split::Train, Domain::Target, MaskChoice::None)?;
            let masks: Vec<(String, pmud_core::ndarray::Array2<f64>)> = targets
                .iter()
                .map(|s| Ok((s.sample_id.clone(), net.segment(&s.pixels)?)))
                .collect::<Result<_, Error>>()?;
            dataset::write_predicted_masks(&data, Split::Train, Domain::Target, &masks)?;
            println!(
                "segmenter trained ({} steps, final loss {:.4}); {} target masks materialized",
                trace.len(),
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN),
                masks.len()
            );
            Ok(())
        }
        Command::Pretrain { cfg, data, out } => {
            let config = cfg.resolve()?;
            let run = RunDir::create(&out, &config, cfg.seed)?;
            let prepared_data = load_train_data(&data, &config)?;
            let (encoder, decoder, trace) =
                pretrain(&config, &prepared_data, cfg.seed, Some(&run))?;
            checkpoint::save(
                &ParamBundle::from_sections(&[&encoder, &decoder]),
                &run.path("pretrain.ckpt"),
            )?;
            println!(
                "pre-training done: {} steps, loss {:.5} -> {:.5}",
                trace.len(),
                trace.first().map(|r| r.loss).unwrap_or(f64::NAN),
                trace.last().map(|r| r.loss).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Finetune {
            cfg,
            data,
            out,
            pretrained,
        } => {
            let config = cfg.resolve()?;
            let run = RunDir::create(&out, &config, cfg.seed)?;
            let prepared_data = load_train_data(&data, &config)?;
            let encoder = match &pretrained {
                Some(path) => {
                    let bundle = checkpoint::load(path)?;
                    let mut enc = Encoder::init(&config, &mut seeds::stream(0));
                    bundle.load_into(&mut enc)?;
                    Some(enc)
                }
                None => None,
            };
            let (encoder, head, trace) =
                finetune(&config, &prepared_data, encoder.as_ref(), cfg.seed, Some(&run))?;
            checkpoint::save(
                &ParamBundle::from_sections(&[&encoder, &head]),
                &run.path("finetune.ckpt"),
            )?;
            println!(
                "fine-tuning done: {} steps, heatmap loss {:.4} -> {:.4}",
                trace.len(),
                trace.first().map(|r| r.kpt_loss).unwrap_or(f64::NAN),
                trace.last().map(|r| r.kpt_loss).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Command::Eval {
            cfg,
            data,
            checkpoint: ckpt,
            out,
            split,
            domain,
        } => {
            let config = cfg.resolve()?;
            let (encoder, head) = load_finetuned(&ckpt, &config)?;
            let (samples, _) = dataset::read_domain(
                &data,
                parse_split(&split)?,
                parse_domain(&domain)?,
                MaskChoice::GroundTruth,
            )?;
            let report = evaluate(&encoder, &head, &samples, &config)?;
            report.write(&out)?;
            println!(
                "{}/{}: EPE {:.2} mm, MPJPE {:.2} mm, PA-MPJPE {:.2} mm over {} samples",
                split,
                domain,
                report.summary.epe_mm,
                report.summary.mpjpe_mm,
                report.summary.pa_mpjpe_mm,
                report.summary.n_samples
            );
            Ok(())
        }
        Command::ProbeAttn {
            cfg,
            data,
            checkpoint: ckpt,
            out,
            split,
            domain,
        } => {
            let config = cfg.resolve()?;
            let (encoder, _head) = load_finetuned(&ckpt, &config)?;
            let (samples, _) = dataset::read_domain(
                &data,
                parse_split(&split)?,
                parse_domain(&domain)?,
                MaskChoice::GroundTruth,
            )?;
            let records = probe_attention(&encoder, &samples, &config, Some(&out))?;
            let path = out.join("probe.json");
            std::fs::write(&path, serde_json::to_string_pretty(&records)?)?;
            let masses: Vec<f64> = records.iter().filter_map(|r| r.fg_attention_mass).collect();
            let mean = masses.iter().sum::<f64>() / masses.len().max(1) as f64;
            println!(
                "{} overlays written to {}; mean foreground attention mass {:.4}",
                records.len(),
                out.display(),
                mean
            );
            Ok(())
        }
        Command::Ablate {
            cfg,
            data,
            out,
            variants,
        } => {
            let config = cfg.resolve()?;
            let list: Vec<Variant> = match variants {
                Some(text) => text
                    .split(',')
                    .map(|s| parse_variant(s.trim()))
                    .collect::<anyhow::Result<_>>()?,
                None => vec![
                    Variant::Full,
                    Variant::WithoutFcr,
                    Variant::WithoutAr,
                    Variant::WithoutBoth,
                    Variant::WithoutTargetMasks,
                    Variant::WithoutUnconstrained,
                ],
            };
            std::fs::create_dir_all(&out)?;
            let prepared = pipeline::prepare(&config, &data, cfg.seed)?;
            if let (Some(s), Some(t)) = (prepared.seg_iou_source, prepared.seg_iou_target) {
                println!("segmenter IoU: source {s:.3}, target {t:.3}");
            }
            let mut rows = Vec::new();
            for v in list {
                let outcome = pipeline::run_variant(&config, v, &prepared, cfg.seed, Some(&out))?;
                println!(
                    "{}: EPE {:.2} mm (fg-attn {:.3})",
                    v.label(),
                    outcome.eval.summary.epe_mm,
                    outcome.fg_attention_mass
                );
                rows.push(outcome.summary());
            }
            let table = pipeline::format_table(&rows);
            print!("{table}");
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&rows)?)?;
            std::fs::write(out.join("ablation.txt"), table)?;
            Ok(())
        }
    }
}

/// Load training inputs per the configured target-mask source.
fn load_train_data(
    root: &Path,
    cfg: &ModelConfig,
) -> anyhow::Result<pmud_core::train::TrainData> {
    use pmud_core::config::TargetMaskSource;
    let (source, _) =
        dataset::read_domain(root, Split::Train, Domain::Source, MaskChoice::GroundTruth)?;
    let target_choice = match cfg.ablation.target_masks {
        TargetMaskSource::Learned => MaskChoice::Predicted,
        TargetMaskSource::Oracle => MaskChoice::GroundTruth,
        TargetMaskSource::None => MaskChoice::None,
    };
    let (target, _) = dataset::read_domain(root, Split::Train, Domain::Target, target_choice)?;
    if cfg.ablation.target_masks == TargetMaskSource::Learned
        && target.iter().any(|s| s.mask.is_none())
    {
        bail!("predicted target masks missing; run `pmud train-seg` first");
    }
    let unconstrained =
        dataset::read_domain(root, Split::Train, Domain::Unconstrained, MaskChoice::None)
            .map(|(samples, _)| samples.into_iter().map(|s| s.pixels).collect())
            .unwrap_or_default();
    Ok(pmud_core::train::TrainData {
        source,
        target,
        unconstrained,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            if err.is::<UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
