//! Two-stage training orchestration: stage 1 learns disentangled
//! representations; stage 2 freezes them and trains the backbone,
//! MCL layers, projections, and null embeddings on the reconstruction
//! objective with modality swapping, style-keyword dropout, and
//! classifier-free condition dropout.
//!
//! All randomness comes from one seed, split into per-purpose ChaCha
//! streams, so results do not depend on data-loader worker counts.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::Config;
use crate::csdn::{self, TextMode};
use crate::dataset::{self, Manifest, StyleText, TripletBatch};
use crate::encoders;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::losses::{self, DisentangleBreakdown};
use crate::mcl::{self, ConditionVars};
use crate::nn::AdamW;
use crate::schedule::NoiseSchedule;
use crate::unet;

/// Purpose-split rng streams derived from one seed.
mod streams {
    pub const INIT: u64 = 0;
    pub const DATA_ORDER: u64 = 1;
    pub const ITM_PAIRS: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SWAPS: u64 = 4;
    pub const KEYWORD_DROP: u64 = 5;
    pub const COND_DROP: u64 = 6;
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Parameter-group filters for the two stages.
pub fn stage1_trainable(name: &str) -> bool {
    ["encoders.", "csdn.", "itm.", "itg."]
        .iter()
        .any(|p| name.starts_with(p))
}

pub fn stage2_trainable(name: &str) -> bool {
    ["mcl.", "unet.", "proj.", "null."]
        .iter()
        .any(|p| name.starts_with(p))
}

/// Where each condition comes from for one training sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CondSource {
    Image,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModalityChoice {
    pub style_source: CondSource,
    pub content_source: CondSource,
}

/// Draw the style/content sources independently: text with probability
/// `p_swap_style` / `p_swap_content`, image otherwise.
pub fn sample_condition_sources(
    rng: &mut ChaCha12Rng,
    p_swap_style: f64,
    p_swap_content: f64,
) -> ModalityChoice {
    let style_source = if rng.gen::<f64>() < p_swap_style {
        CondSource::Text
    } else {
        CondSource::Image
    };
    let content_source = if rng.gen::<f64>() < p_swap_content {
        CondSource::Text
    } else {
        CondSource::Image
    };
    ModalityChoice {
        style_source,
        content_source,
    }
}

/// Independently drop each style keyword with probability
/// `p_keyword_drop`; if every keyword would be dropped, retain one chosen
/// uniformly. Order is preserved.
pub fn drop_style_keywords(
    style: &StyleText,
    rng: &mut ChaCha12Rng,
    p_keyword_drop: f64,
) -> StyleText {
    let survivors: Vec<(dataset::StyleAttribute, String)> = style
        .keywords
        .iter()
        .filter(|_| rng.gen::<f64>() >= p_keyword_drop)
        .cloned()
        .collect();
    let keywords = if survivors.is_empty() {
        let keep = rng.gen_range(0..style.keywords.len());
        vec![style.keywords[keep].clone()]
    } else {
        survivors
    };
    StyleText::from_keywords(keywords).expect("1..=4 keywords")
}

/// Tile a pooled `[1, d]` embedding to `[rows, d]` so text-sourced
/// conditions match the query-sequence shape.
pub fn tile_rows(pooled: &Array2<f64>, rows: usize) -> Array2<f64> {
    let d = pooled.dim().1;
    Array2::from_shape_fn((rows, d), |(_, j)| pooled[[0, j]])
}

/// Per-step JSON Lines log entry for stage 1.
#[derive(Debug, serde::Serialize)]
struct Stage1LogEntry {
    step: u64,
    #[serde(rename = "L")]
    total: f64,
    #[serde(rename = "L_s")]
    l_s: f64,
    #[serde(rename = "L_c")]
    l_c: f64,
    itc_s: f64,
    itm_s: f64,
    itg_s: f64,
    itc_c: f64,
    itm_c: f64,
    itg_c: f64,
}

#[derive(Debug, serde::Serialize)]
struct Stage2LogEntry {
    step: u64,
    loss: f64,
}

pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Per-step total losses, for determinism checks and inspection.
    pub loss_curve: Vec<f64>,
}

fn dump_diagnostics(
    out_dir: &Path,
    step: u64,
    indices: &[usize],
    detail: &serde_json::Value,
) -> Result<()> {
    let dump = serde_json::json!({
        "step": step,
        "batch_indices": indices,
        "detail": detail,
    });
    std::fs::write(
        out_dir.join("diverged_batch.json"),
        serde_json::to_string_pretty(&dump)?,
    )?;
    Ok(())
}

/// Deterministic epoch-shuffled batch index stream.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha12Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: ChaCha12Rng) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n, // force a shuffle on first use
            rng,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }
}

/// Preload every manifest image once; desk-scale datasets fit in memory
/// and reloading PNGs per step would dominate the step time.
fn preload_images(
    manifest: &Manifest,
    image_root: &Path,
    image_size: usize,
    channels: usize,
) -> Result<Vec<ndarray::Array3<f64>>> {
    let indices: Vec<usize> = (0..manifest.len()).collect();
    let batch = dataset::load_triplet_batch(manifest, &indices, image_size, channels, image_root)?;
    Ok(batch.images)
}

fn batch_from_cache(
    manifest: &Manifest,
    cache: &[ndarray::Array3<f64>],
    indices: &[usize],
) -> TripletBatch {
    TripletBatch {
        images: indices.iter().map(|&i| cache[i].clone()).collect(),
        content_texts: indices
            .iter()
            .map(|&i| manifest.entries[i].content.text.clone())
            .collect(),
        style_texts: indices
            .iter()
            .map(|&i| manifest.entries[i].style.clone())
            .collect(),
        indices: indices.to_vec(),
    }
}

/// Stage 1: optimize encoders, query banks, Q-Former, ITM classifiers,
/// and the ITG decoder on the combined disentanglement objective.
pub fn train_disentangle(
    cfg: &Config,
    manifest: &Manifest,
    image_root: &Path,
    out_dir: &Path,
) -> Result<TrainOutput> {
    let t = &cfg.train;
    if manifest.len() < t.batch_size {
        return Err(Error::InvalidArgument(format!(
            "manifest has {} entries, need at least batch_size {}",
            manifest.len(),
            t.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");

    let mut init_rng = stream_rng(t.seed, streams::INIT);
    let mut store = ParamStore::new();
    encoders::init_encoders(&mut store, &cfg.model, &mut init_rng);
    csdn::init_csdn(&mut store, &cfg.model, &mut init_rng);
    losses::init_losses(&mut store, &cfg.model, &mut init_rng);

    let cache = preload_images(manifest, image_root, cfg.model.image_size, cfg.model.in_channels)?;
    let mut sampler = BatchSampler::new(manifest.len(), stream_rng(t.seed, streams::DATA_ORDER));
    let mut pair_rng = stream_rng(t.seed, streams::ITM_PAIRS);

    let mut opt = AdamW::new(t.learning_rate, t.weight_decay, t.grad_clip);
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.jsonl"))?);

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut loss_curve = Vec::new();

    for step in 1..=t.steps_stage1 {
        let indices = sampler.next_batch(t.batch_size);
        let batch = batch_from_cache(manifest, &cache, &indices);

        let mut g = Graph::new();
        let (loss_var, breakdown) =
            losses::disentangle_loss_var(&mut g, &store, &cfg.model, t.tau, &batch, &mut pair_rng)?;
        let loss = g.scalar(loss_var);
        if !loss.is_finite() {
            dump_diagnostics(out_dir, step, &indices, &serde_json::to_value(&breakdown)?)?;
            return Err(Error::Diverged {
                step,
                message: format!("non-finite disentangle loss; batch dumped to {}", out_dir.display()),
            });
        }
        if step == 1 {
            initial_loss = loss;
        }
        final_loss = loss;
        loss_curve.push(loss);

        let grads = g.backward(loss_var);
        let param_grads = g.param_grads(&grads);
        opt.apply(&mut store, &param_grads, stage1_trainable);

        write_log(&mut log, &Stage1LogEntry::from_breakdown(step, &breakdown))?;
        if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
            save_step_checkpoint(&ckpt_dir, step, cfg, &store, &opt)?;
        }
    }
    log.flush()?;

    let checkpoint = Checkpoint {
        step: t.steps_stage1,
        config: cfg.clone(),
        params: store,
        optimizer: Some(OptimizerState::from_adamw(&opt)),
    };
    checkpoint.save(&ckpt_dir.join("stage1_final.ckpt"))?;
    Checkpoint::write_latest(&ckpt_dir, "stage1_final.ckpt")?;
    Ok(TrainOutput {
        checkpoint,
        initial_loss,
        final_loss,
        loss_curve,
    })
}

impl Stage1LogEntry {
    fn from_breakdown(step: u64, b: &DisentangleBreakdown) -> Self {
        Self {
            step,
            total: b.total,
            l_s: b.l_s,
            l_c: b.l_c,
            itc_s: b.itc_s,
            itm_s: b.itm_s,
            itg_s: b.itg_s,
            itc_c: b.itc_c,
            itm_c: b.itm_c,
            itg_c: b.itg_c,
        }
    }
}

fn write_log<T: serde::Serialize>(log: &mut impl Write, entry: &T) -> Result<()> {
    serde_json::to_writer(&mut *log, entry)?;
    log.write_all(b"\n")?;
    Ok(())
}

fn save_step_checkpoint(
    ckpt_dir: &Path,
    step: u64,
    cfg: &Config,
    store: &ParamStore,
    opt: &AdamW,
) -> Result<()> {
    let name = format!("step_{step:06}.ckpt");
    Checkpoint {
        step,
        config: cfg.clone(),
        params: store.clone(),
        optimizer: Some(OptimizerState::from_adamw(opt)),
    }
    .save(&ckpt_dir.join(&name))?;
    Checkpoint::write_latest(ckpt_dir, &name)?;
    Ok(())
}

/// Frozen CSDN outputs for one sample, computed outside the training
/// graph.
struct FrozenCsdn {
    style_seq: Array2<f64>,
    content_seq: Array2<f64>,
}

fn frozen_csdn_embeddings(
    store: &ParamStore,
    cfg: &Config,
    image: &ndarray::Array3<f64>,
) -> Result<FrozenCsdn> {
    let mut g = Graph::eval();
    let f_i = encoders::encode_image_var(&mut g, store, &cfg.model, image)?;
    let vq = csdn::extract_visual_var(&mut g, store, &cfg.model, f_i)?;
    Ok(FrozenCsdn {
        style_seq: g.value2(vq.style_seq).to_owned(),
        content_seq: g.value2(vq.content_seq).to_owned(),
    })
}

fn frozen_text_pooled(
    store: &ParamStore,
    cfg: &Config,
    text: &str,
    mode: TextMode,
) -> Result<Array2<f64>> {
    let tokens = encoders::tokenize(text, cfg.model.text_max_len)?;
    let mut g = Graph::eval();
    let emb = csdn::encode_text_var(&mut g, store, &cfg.model, &tokens, mode)?;
    Ok(g.value2(emb.pooled).to_owned())
}

/// Stage 2: freeze everything from stage 1 and optimize the backbone,
/// MCL layers, projections, and null embeddings on reconstruction.
pub fn train_generative(
    cfg: &Config,
    manifest: &Manifest,
    image_root: &Path,
    csdn_checkpoint: &Checkpoint,
    out_dir: &Path,
) -> Result<TrainOutput> {
    let t = &cfg.train;
    if manifest.len() < t.batch_size {
        return Err(Error::InvalidArgument(format!(
            "manifest has {} entries, need at least batch_size {}",
            manifest.len(),
            t.batch_size
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");

    let mut store = csdn_checkpoint.params.clone();
    for name in ["encoders.token_table", "csdn.style_queries"] {
        if !store.contains(name) {
            return Err(Error::Checkpoint(format!(
                "stage-1 checkpoint is missing `{name}`; run train-disentangle first"
            )));
        }
    }
    let mut init_rng = stream_rng(t.seed, streams::INIT);
    init_rng.set_stream(streams::INIT + 100); // distinct from stage-1 init
    if !store.contains("unet.conv_in.w") {
        unet::init_unet(&mut store, &cfg.model, &mut init_rng);
        mcl::init_conditioning(&mut store, &cfg.model, &mut init_rng);
    }

    let schedule = NoiseSchedule::from_config(&cfg.schedule)?;
    let cache = preload_images(manifest, image_root, cfg.model.image_size, cfg.model.in_channels)?;
    // CSDN is frozen for the whole stage: embed every image and text once
    let csdn_cache: Vec<FrozenCsdn> = cache
        .iter()
        .map(|img| frozen_csdn_embeddings(&store, cfg, img))
        .collect::<Result<_>>()?;
    let mut text_cache: std::collections::HashMap<String, Array2<f64>> =
        std::collections::HashMap::new();
    let mut sampler = BatchSampler::new(manifest.len(), stream_rng(t.seed, streams::DATA_ORDER));
    let mut noise_rng = stream_rng(t.seed, streams::NOISE);
    let mut swap_rng = stream_rng(t.seed, streams::SWAPS);
    let mut drop_rng = stream_rng(t.seed, streams::KEYWORD_DROP);
    let mut cond_rng = stream_rng(t.seed, streams::COND_DROP);

    let mut opt = AdamW::new(t.learning_rate, t.weight_decay, t.grad_clip);
    let mut log = std::io::BufWriter::new(std::fs::File::create(out_dir.join("train_log.jsonl"))?);

    let mut initial_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut loss_curve = Vec::new();

    let (ic, size) = (cfg.model.in_channels, cfg.model.image_size);
    for step in 1..=t.steps_stage2 {
        let indices = sampler.next_batch(t.batch_size);
        let batch = batch_from_cache(manifest, &cache, &indices);

        let mut g = Graph::new();
        let mut conds: Vec<ConditionVars> = Vec::with_capacity(batch.len());
        let mut ts = Vec::with_capacity(batch.len());
        for i in 0..batch.len() {
            let dropped = cond_rng.gen::<f64>() < t.p_cond_drop;
            if dropped {
                conds.push(ConditionVars::null(&mut g, &store));
                // keep stream alignment with the non-dropped path
                let _ = sample_condition_sources(&mut swap_rng, t.p_swap_style, t.p_swap_content);
                let _ = drop_style_keywords(&batch.style_texts[i], &mut drop_rng, t.p_keyword_drop);
            } else {
                let choice =
                    sample_condition_sources(&mut swap_rng, t.p_swap_style, t.p_swap_content);
                let style_text =
                    drop_style_keywords(&batch.style_texts[i], &mut drop_rng, t.p_keyword_drop);
                let frozen = &csdn_cache[indices[i]];

                let mut pooled_for = |text: &str, mode: TextMode| -> Result<Array2<f64>> {
                    if let Some(hit) = text_cache.get(text) {
                        return Ok(hit.clone());
                    }
                    let pooled = frozen_text_pooled(&store, cfg, text, mode)?;
                    text_cache.insert(text.to_string(), pooled.clone());
                    Ok(pooled)
                };
                let e_s = match choice.style_source {
                    CondSource::Image => frozen.style_seq.clone(),
                    CondSource::Text => {
                        let pooled = pooled_for(&style_text.rendered, TextMode::Style)?;
                        tile_rows(&pooled, cfg.model.n_style_queries)
                    }
                };
                let e_c = match choice.content_source {
                    CondSource::Image => frozen.content_seq.clone(),
                    CondSource::Text => {
                        let pooled = pooled_for(&batch.content_texts[i], TextMode::Content)?;
                        tile_rows(&pooled, cfg.model.n_content_queries)
                    }
                };
                let content_tokens =
                    encoders::tokenize(&batch.content_texts[i], cfg.model.text_max_len)?;
                let e_c_var = g.constant2(e_c);
                let e_s_var = g.constant2(e_s);
                let content = mcl::build_content_condition_var(
                    &mut g,
                    &store,
                    &cfg.model,
                    Some(&content_tokens),
                    Some(e_c_var),
                )?;
                let style = mcl::build_style_condition_var(&mut g, &store, e_s_var)?;
                conds.push(ConditionVars { content, style });
            }
            ts.push(noise_rng.gen_range(1..=schedule.train_timesteps));
        }

        let mut z0 = Array4::<f64>::zeros((batch.len(), ic, size, size));
        for (i, img) in batch.images.iter().enumerate() {
            z0.index_axis_mut(ndarray::Axis(0), i).assign(img);
        }
        let loss_var = unet::reconstruction_loss_var(
            &mut g,
            &store,
            &cfg.model,
            &schedule,
            &z0,
            &ts,
            &conds,
            &mut noise_rng,
        )?;
        let loss = g.scalar(loss_var);
        if !loss.is_finite() {
            dump_diagnostics(out_dir, step, &indices, &serde_json::json!({"loss": "non-finite"}))?;
            return Err(Error::Diverged {
                step,
                message: format!("non-finite reconstruction loss; batch dumped to {}", out_dir.display()),
            });
        }
        if step == 1 {
            initial_loss = loss;
        }
        final_loss = loss;
        loss_curve.push(loss);

        let grads = g.backward(loss_var);
        let param_grads = g.param_grads(&grads);
        opt.apply(&mut store, &param_grads, stage2_trainable);

        write_log(&mut log, &Stage2LogEntry { step, loss })?;
        if t.checkpoint_every > 0 && step % t.checkpoint_every == 0 {
            save_step_checkpoint(&ckpt_dir, step, cfg, &store, &opt)?;
        }
    }
    log.flush()?;

    let checkpoint = Checkpoint {
        step: t.steps_stage2,
        config: cfg.clone(),
        params: store,
        optimizer: Some(OptimizerState::from_adamw(&opt)),
    };
    checkpoint.save(&ckpt_dir.join("stage2_final.ckpt"))?;
    Checkpoint::write_latest(&ckpt_dir, "stage2_final.ckpt")?;
    Ok(TrainOutput {
        checkpoint,
        initial_loss,
        final_loss,
        loss_curve,
    })
}
