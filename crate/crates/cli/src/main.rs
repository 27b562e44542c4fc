//! Command-line entry point for the full pipeline: dataset construction,
//! the two training stages, multimodal stylization, evaluation, and
//! checkpoint inspection.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use stylediff_core::captioner::{CaptionerClient, EchoCaptioner, HttpCaptioner};
use stylediff_core::checkpoint::Checkpoint;
use stylediff_core::config::Config;
use stylediff_core::dataset::{self, FilterRules, Manifest};
use stylediff_core::evaluate::{self, ContrastStub, PromptSet, StubEmbedder};
use stylediff_core::stylize::{self, ContentInput, StyleInput, StylizeRequest};
use stylediff_core::toydata::{self, ToyDatasetSpec};
use stylediff_core::training;

#[derive(Parser)]
#[command(
    name = "stylediff",
    version,
    about = "Disentangled content/style conditioning for a small latent diffusion model",
    after_help = "Configuration precedence: config file, then command-line flags, then STYLEDIFF_* environment variables."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// TOML config file; defaults apply when omitted
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed overriding the config's train.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a triplet manifest from artwork metadata (or generate the
    /// synthetic latent dataset)
    BuildDataset {
        #[command(flatten)]
        common: CommonOpts,
        /// JSON Lines metadata file of artwork records
        #[arg(long, required_unless_present = "synthetic")]
        metadata: Option<PathBuf>,
        /// Directory image paths are resolved against
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Output directory for manifest.jsonl, manifest.stats.json, skipped.jsonl
        #[arg(long)]
        out: PathBuf,
        /// Captioner backend
        #[arg(long, value_parser = ["echo", "http"], default_value = "echo")]
        captioner: String,
        /// Generate the synthetic striped-latent dataset instead of
        /// ingesting metadata
        #[arg(long)]
        synthetic: bool,
        /// Samples per (content, style) cell for --synthetic
        #[arg(long, default_value_t = 64)]
        samples_per_cell: usize,
    },
    /// Stage 1: train the disentanglement network on a manifest
    TrainDisentangle {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory containing manifest.jsonl
        #[arg(long)]
        manifest_dir: PathBuf,
        /// Image root (defaults to the manifest directory)
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Output directory for logs and checkpoints
        #[arg(long)]
        out: PathBuf,
        /// Override train.steps_stage1
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Stage 2: train the diffusion backbone with frozen stage-1 weights
    TrainGenerate {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        manifest_dir: PathBuf,
        #[arg(long)]
        image_root: Option<PathBuf>,
        /// Stage-1 checkpoint to load
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override train.steps_stage2
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Sample images from a trained checkpoint with any mix of style and
    /// content inputs
    Stylize {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// DDIM steps (overrides sample.steps)
        #[arg(long)]
        steps: Option<usize>,
        /// Classifier-free guidance scale (overrides sample.guidance_scale)
        #[arg(long)]
        guidance_scale: Option<f64>,
        /// Style reference image
        #[arg(long, conflicts_with = "style_text")]
        style_image: Option<PathBuf>,
        /// Style keywords, e.g. "artist: X, medium: oil"
        #[arg(long)]
        style_text: Option<String>,
        /// Content reference image
        #[arg(long)]
        content_image: Option<PathBuf>,
        /// Content prompt
        #[arg(long)]
        content_text: Option<String>,
        /// Number of images to sample
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output file stem
        #[arg(long, default_value = "sample")]
        stem: String,
    },
    /// Compute SS/TA/IQ metrics over a directory of generated images
    Evaluate {
        #[command(flatten)]
        common: CommonOpts,
        /// Directory of generated .png images
        #[arg(long)]
        images: PathBuf,
        /// Directory containing the prompt manifest (manifest.jsonl)
        #[arg(long)]
        manifest_dir: PathBuf,
        /// Report output path
        #[arg(long, default_value = "eval_report.json")]
        out: PathBuf,
        /// Also write a CSV next to the JSON report
        #[arg(long)]
        csv: bool,
        /// Checkpoint id recorded in the report metadata
        #[arg(long)]
        checkpoint_id: Option<String>,
    },
    /// Print the parameter groups, step, and config of a checkpoint
    InspectCheckpoint {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn resolve_config(common: &CommonOpts, extra: impl FnOnce(&mut Config)) -> anyhow::Result<Config> {
    let cfg = Config::resolve(common.config.as_deref(), |cfg| {
        if let Some(seed) = common.seed {
            cfg.train.seed = seed;
        }
        extra(cfg);
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::BuildDataset {
            common,
            metadata,
            image_root,
            out,
            captioner,
            synthetic,
            samples_per_cell,
        } => {
            let cfg = resolve_config(&common, |_| {})?;
            if synthetic {
                let mut rng = training::stream_rng(cfg.train.seed, 7);
                let manifest = toydata::generate_toy_dataset(
                    &out,
                    ToyDatasetSpec {
                        samples_per_cell,
                        image_size: cfg.model.image_size,
                        noise_std: 0.05,
                    },
                    &mut rng,
                )?;
                println!(
                    "synthetic dataset: {} triplets under {}",
                    manifest.len(),
                    out.display()
                );
                return Ok(());
            }
            let metadata = metadata.expect("clap enforces --metadata without --synthetic");
            let image_root = image_root.unwrap_or_else(|| {
                metadata.parent().map(Path::to_path_buf).unwrap_or_default()
            });
            let client: Box<dyn CaptionerClient> = match captioner.as_str() {
                "echo" => Box::new(EchoCaptioner),
                "http" => Box::new(HttpCaptioner::new(cfg.dataset.captioner.clone())),
                other => bail!("unknown captioner backend `{other}`"),
            };
            let rules = FilterRules::from_config(&cfg.dataset);
            let build = dataset::build_manifest(
                &metadata,
                &image_root,
                client.as_ref(),
                &rules,
                cfg.dataset.workers,
                cfg.dataset.captioner.retries,
            )?;
            build.manifest.save(&out)?;
            dataset::write_skipped(&out, &build.skipped)?;
            println!(
                "manifest: {} entries ({} kept, {} excluded, {} skipped) -> {}",
                build.manifest.len(),
                build.manifest.stats.kept,
                build.manifest.stats.excluded,
                build.manifest.stats.skipped,
                out.display()
            );
            Ok(())
        }
        Command::TrainDisentangle {
            common,
            manifest_dir,
            image_root,
            out,
            steps,
        } => {
            let cfg = resolve_config(&common, |cfg| {
                if let Some(steps) = steps {
                    cfg.train.steps_stage1 = steps;
                }
            })?;
            let manifest = Manifest::load(&manifest_dir)?;
            let image_root = image_root.unwrap_or(manifest_dir);
            let result = training::train_disentangle(&cfg, &manifest, &image_root, &out)?;
            println!(
                "stage 1 done: {} steps, loss {:.4} -> {:.4}; checkpoint in {}",
                cfg.train.steps_stage1,
                result.initial_loss,
                result.final_loss,
                out.join("checkpoints").display()
            );
            Ok(())
        }
        Command::TrainGenerate {
            common,
            manifest_dir,
            image_root,
            checkpoint,
            out,
            steps,
        } => {
            let cfg = resolve_config(&common, |cfg| {
                if let Some(steps) = steps {
                    cfg.train.steps_stage2 = steps;
                }
            })?;
            let manifest = Manifest::load(&manifest_dir)?;
            let image_root = image_root.unwrap_or(manifest_dir);
            let stage1 = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let result = training::train_generative(&cfg, &manifest, &image_root, &stage1, &out)?;
            println!(
                "stage 2 done: {} steps, loss {:.4} -> {:.4}; checkpoint in {}",
                cfg.train.steps_stage2,
                result.initial_loss,
                result.final_loss,
                out.join("checkpoints").display()
            );
            Ok(())
        }
        Command::Stylize {
            common,
            checkpoint,
            out,
            steps,
            guidance_scale,
            style_image,
            style_text,
            content_image,
            content_text,
            count,
            stem,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            // the checkpoint's config snapshot defines the architecture;
            // file/flags/env still control sampling parameters
            let mut cfg = ckpt.config.clone();
            if let Some(path) = common.config.as_deref() {
                let file_cfg = Config::load(path)?;
                cfg.sample = file_cfg.sample;
            }
            if let Some(s) = steps {
                cfg.sample.steps = s;
            }
            if let Some(g) = guidance_scale {
                cfg.sample.guidance_scale = g;
            }
            cfg.apply_env_overrides(|k| std::env::var(k).ok())?;
            let seed = common.seed.unwrap_or(cfg.train.seed);

            let size = cfg.model.image_size;
            let channels = cfg.model.in_channels;
            let style_img = style_image
                .map(|p| dataset::load_image_tensor(&p, size, channels))
                .transpose()?;
            let style_txt = style_text.map(|s| dataset::parse_style_text(&s)).transpose()?;
            let style = match (&style_img, &style_txt) {
                (Some(img), None) => StyleInput::Image(img),
                (None, Some(txt)) => StyleInput::Text(txt),
                (None, None) => StyleInput::None,
                (Some(_), Some(_)) => unreachable!("clap conflicts_with"),
            };
            let content_img = content_image
                .map(|p| dataset::load_image_tensor(&p, size, channels))
                .transpose()?;
            let content = match (&content_img, &content_text) {
                (Some(img), Some(text)) => ContentInput::Both { image: img, text },
                (Some(img), None) => ContentInput::Image(img),
                (None, Some(text)) => ContentInput::Text(text),
                (None, None) => bail!("stylize needs --content-image and/or --content-text"),
            };

            let request = StylizeRequest {
                style,
                content,
                steps: cfg.sample.steps,
                guidance_scale: cfg.sample.guidance_scale,
                seed,
                checkpoint_id: Some(checkpoint.display().to_string()),
            };
            let output = stylize::stylize(&ckpt.params, &cfg, &request, count)?;
            let written = stylize::write_outputs(&out, &stem, &output)?;
            println!("wrote {} image(s) to {}", written.len(), out.display());
            Ok(())
        }
        Command::Evaluate {
            common,
            images,
            manifest_dir,
            out,
            csv,
            checkpoint_id,
        } => {
            let _cfg = resolve_config(&common, |_| {})?;
            let manifest = Manifest::load(&manifest_dir)?;
            let prompts = PromptSet::from_manifest(&manifest, manifest_dir.display().to_string());
            let report = evaluate::evaluate_run(
                &images,
                &prompts,
                &StubEmbedder::default(),
                &ContrastStub,
                checkpoint_id,
            )?;
            report.save_json(&out)?;
            if csv {
                report.save_csv(&out.with_extension("csv"))?;
            }
            println!(
                "evaluated {} images (SS {:.4}, TA {:.4}, IQ {:.4}) -> {}",
                report.rows.len(),
                report.ss.mean,
                report.ta.mean,
                report.iq.mean,
                out.display()
            );
            Ok(())
        }
        Command::InspectCheckpoint { common: _, checkpoint } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            println!("checkpoint: {}", checkpoint.display());
            println!("step: {}", ckpt.step);
            println!(
                "optimizer state: {}",
                if ckpt.optimizer.is_some() { "present" } else { "absent" }
            );
            println!("parameter groups:");
            let mut total = 0usize;
            for (group, tensors, elements) in ckpt.group_summary() {
                println!("  {group:<10} {tensors:>4} tensors {elements:>10} elements");
                total += elements;
            }
            println!("  {:<10} {:>4}         {total:>10} elements", "total", "");
            println!("config snapshot:\n{}", serde_json::to_string_pretty(&ckpt.config)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let structured = serde_json::json!({
                "error": format!("{err:#}"),
            });
            eprintln!("{structured}");
            ExitCode::FAILURE
        }
    }
}
