//! Multi-step cross-attention layers: learnable cross-attention that
//! injects the content condition at every level of the backbone and the
//! style condition only in the middle block. The same layer parameters
//! are applied at every denoising timestep; conditions are re-injected
//! each step.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::csdn::{self, ProjectionHead};
use crate::encoders::{TokenSequence, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn;

/// Placement of an MCL layer in the backbone. Exactly one middle block
/// exists; it is the sole injection site for style.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockRole {
    Down,
    Middle,
    Up,
}

/// Condition sequences in backbone width, plus provenance flags for the
/// classifier-free guidance branches. Null sequences are the learned null
/// embeddings, never zeros.
#[derive(Debug, Clone)]
pub struct ConditionPack {
    /// `[k_c, d_sd]`: text-encoder features of the content text
    /// concatenated with the projected content queries.
    pub content: Array2<f64>,
    /// `[k_s, d_sd]`: projected style queries (or tiled text embedding).
    pub style: Array2<f64>,
    pub content_is_null: bool,
    pub style_is_null: bool,
}

impl ConditionPack {
    /// The fully-unconditional pack built from the learned null
    /// embeddings, used for the CFG unconditional branch.
    pub fn null(store: &ParamStore) -> Self {
        let null_c = store.get("null.content");
        let null_s = store.get("null.style");
        let d = null_c.shape()[1];
        Self {
            content: Array2::from_shape_fn((1, d), |(i, j)| null_c[[i, j]]),
            style: Array2::from_shape_fn((1, d), |(i, j)| null_s[[i, j]]),
            content_is_null: true,
            style_is_null: true,
        }
    }
}

/// Graph handles to one sample's conditions.
#[derive(Debug, Clone, Copy)]
pub struct ConditionVars {
    pub content: Var,
    pub style: Var,
}

impl ConditionVars {
    pub fn from_pack(g: &mut Graph, pack: &ConditionPack) -> Self {
        Self {
            content: g.constant2(pack.content.clone()),
            style: g.constant2(pack.style.clone()),
        }
    }

    /// Differentiable null conditions (the null embeddings are trained).
    pub fn null(g: &mut Graph, store: &ParamStore) -> Self {
        Self {
            content: g.param(store, "null.content"),
            style: g.param(store, "null.style"),
        }
    }
}

/// Register one MCL layer. Style projections exist only on the middle
/// block.
pub fn init_mcl_layer(
    store: &mut ParamStore,
    name: &str,
    role: BlockRole,
    d_z: usize,
    d_sd: usize,
    rng: &mut ChaCha12Rng,
) {
    nn::init_layer_norm(store, &format!("{name}.ln"), d_z);
    nn::init_normal(store, &format!("{name}.wq"), &[d_z, d_z], 1.0 / (d_z as f64).sqrt(), rng);
    nn::init_normal(
        store,
        &format!("{name}.content.wk"),
        &[d_sd, d_z],
        1.0 / (d_sd as f64).sqrt(),
        rng,
    );
    nn::init_normal(
        store,
        &format!("{name}.content.wv"),
        &[d_sd, d_z],
        1.0 / (d_sd as f64).sqrt(),
        rng,
    );
    if role == BlockRole::Middle {
        nn::init_normal(
            store,
            &format!("{name}.style.wk"),
            &[d_sd, d_z],
            1.0 / (d_sd as f64).sqrt(),
            rng,
        );
        nn::init_normal(
            store,
            &format!("{name}.style.wv"),
            &[d_sd, d_z],
            1.0 / (d_sd as f64).sqrt(),
            rng,
        );
    }
    // zero-init output projection: the layer starts as an identity
    // residual and learns its contribution
    nn::init_zeros(store, &format!("{name}.wo"), &[d_z, d_z]);
}

/// One MCL layer over latent tokens `z` (`[n_z, d_z]`).
///
/// Keys and values come from the content sequence alone outside the
/// middle block; in the middle block they are the row-wise concatenation
/// of content and style projections. Output is multi-head attention plus
/// a residual connection to `z`. A middle-role call against parameters
/// lacking style projections is an error; non-middle layers never read
/// the style sequence.
pub fn mcl_cross_attention(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    role: BlockRole,
    z: Var,
    cond: ConditionVars,
    n_heads: usize,
) -> Result<Var> {
    let d_z = g.shape(z)[1];
    let wq_shape = store.get(&format!("{name}.wq")).shape().to_vec();
    if wq_shape[0] != d_z {
        return Err(Error::shape(format!("[*, {}]", wq_shape[0]), format!("[*, {d_z}]")));
    }
    if d_z % n_heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "d_z {d_z} not divisible by {n_heads} heads"
        )));
    }
    if role == BlockRole::Middle && !store.contains(&format!("{name}.style.wk")) {
        return Err(Error::InvalidArgument(format!(
            "layer `{name}` has no style projections but was invoked as the middle block"
        )));
    }

    let normed = nn::layer_norm(g, store, &format!("{name}.ln"), z);
    let wq = g.param(store, &format!("{name}.wq"));
    let q = g.matmul(normed, wq);

    let wck = g.param(store, &format!("{name}.content.wk"));
    let wcv = g.param(store, &format!("{name}.content.wv"));
    let k_content = g.matmul(cond.content, wck);
    let v_content = g.matmul(cond.content, wcv);
    let (k, v) = if role == BlockRole::Middle {
        let wsk = g.param(store, &format!("{name}.style.wk"));
        let wsv = g.param(store, &format!("{name}.style.wv"));
        let k_style = g.matmul(cond.style, wsk);
        let v_style = g.matmul(cond.style, wsv);
        (
            g.concat_rows(&[k_content, k_style]),
            g.concat_rows(&[v_content, v_style]),
        )
    } else {
        (k_content, v_content)
    };

    let dh = d_z / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.mul_scalar(scores, scale);
        let attn = g.softmax_rows(scaled, None);
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    let wo = g.param(store, &format!("{name}.wo"));
    let out = g.matmul(cat, wo);
    Ok(g.add(z, out))
}

/// Register the backbone text encoder (the stand-in for a pretrained
/// diffusion text encoder) and the learned null embeddings.
pub fn init_conditioning(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) {
    nn::init_normal(store, "unet.text.table", &[VOCAB_SIZE, cfg.d_sd], 0.02, rng);
    nn::init_normal(store, "unet.text.pos", &[cfg.text_max_len, cfg.d_sd], 0.02, rng);
    for b in 0..cfg.text_encoder_blocks {
        let p = format!("unet.text.blk{b}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), cfg.d_sd);
        nn::init_attention(store, &format!("{p}.attn"), cfg.d_sd, rng);
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.d_sd);
        nn::init_ffn(store, &format!("{p}.ffn"), cfg.d_sd, cfg.d_sd * 4, rng);
    }
    nn::init_normal(store, "null.content", &[1, cfg.d_sd], 0.02, rng);
    nn::init_normal(store, "null.style", &[1, cfg.d_sd], 0.02, rng);
}

/// Backbone text features `[len, d_sd]` for a token sequence.
pub fn backbone_text_features(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
) -> Result<Var> {
    let content_len = tokens.content_len();
    if content_len == 0 {
        return Err(Error::Tokenizer("all-PAD token sequence".into()));
    }
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::Tokenizer(format!("token id {bad} out of range")));
    }
    let table = g.param(store, "unet.text.table");
    let emb = g.gather(table, &tokens.ids);
    let pos_table = g.param(store, "unet.text.pos");
    let pos = g.slice_rows(pos_table, 0, tokens.len());
    let mut x = g.add(emb, pos);
    let mask = nn::key_padding_mask(tokens.len(), tokens.len(), content_len);
    for b in 0..cfg.text_encoder_blocks {
        let p = format!("unet.text.blk{b}");
        let n1 = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let attn = nn::multi_head_attention(
            g,
            store,
            &format!("{p}.attn"),
            n1,
            n1,
            cfg.mcl_heads,
            Some(&mask),
        );
        x = g.add(x, attn);
        let n2 = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let f = nn::ffn(g, store, &format!("{p}.ffn"), n2);
        x = g.add(x, f);
    }
    // only the non-PAD rows participate in conditioning
    Ok(g.slice_rows(x, 0, content_len))
}

/// Build the content condition sequence: backbone text features of the
/// content text followed by the projected content queries. Either part
/// may be absent (text-only or image-only conditioning), but not both.
pub fn build_content_condition_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    content_tokens: Option<&TokenSequence>,
    e_c_seq: Option<Var>,
) -> Result<Var> {
    let mut parts = Vec::new();
    if let Some(tokens) = content_tokens {
        parts.push(backbone_text_features(g, store, cfg, tokens)?);
    }
    if let Some(e_c) = e_c_seq {
        parts.push(csdn::project_for_backbone(g, store, e_c, ProjectionHead::Content)?);
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument(
            "content condition needs text tokens, content queries, or both".into(),
        ));
    }
    Ok(g.concat_rows(&parts))
}

/// Project style queries (or a tiled pooled text embedding) to backbone
/// width.
pub fn build_style_condition_var(
    g: &mut Graph,
    store: &ParamStore,
    e_s_seq: Var,
) -> Result<Var> {
    csdn::project_for_backbone(g, store, e_s_seq, ProjectionHead::Style)
}
