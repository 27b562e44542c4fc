//! Content and Style Disentanglement Network: one querying transformer
//! with two physically separate banks of learnable queries. The image
//! path cross-attends to encoder features; the text path reuses the same
//! self-attention and feed-forward weights without cross-attention.

use ndarray::Array2;
use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::encoders::{self, ImageFeatureGrid, TokenSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn;

/// Which downstream pairing a text embedding participates in. The weights
/// are shared between modes; only the loss wiring differs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    Style,
    Content,
}

/// Output head of the backbone projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectionHead {
    Style,
    Content,
}

impl ProjectionHead {
    fn prefix(self) -> &'static str {
        match self {
            ProjectionHead::Style => "proj.style",
            ProjectionHead::Content => "proj.content",
        }
    }
}

/// Graph handles for the disentangled query outputs of one image.
#[derive(Debug, Clone, Copy)]
pub struct VisualQueries {
    /// `[n_qs, d_q]`
    pub style_seq: Var,
    /// `[n_qc, d_q]`
    pub content_seq: Var,
    /// `[1, d_q]`, mean of the style rows
    pub style_pooled: Var,
    /// `[1, d_q]`, mean of the content rows
    pub content_pooled: Var,
}

/// Plain-array view of [`VisualQueries`] for frozen-weight use.
#[derive(Debug, Clone)]
pub struct DisentangledEmbeddings {
    pub style_seq: Array2<f64>,
    pub content_seq: Array2<f64>,
    pub style_pooled: Array2<f64>,
    pub content_pooled: Array2<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct TextEmbedding {
    /// `[1, d_q]`, mean over non-PAD positions
    pub pooled: Var,
    /// `[len, d_q]`
    pub seq: Var,
    pub mode: TextMode,
}

/// Register query banks, Q-Former blocks, and backbone projections.
pub fn init_csdn(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) {
    nn::init_normal(store, "csdn.style_queries", &[cfg.n_style_queries, cfg.d_q], 0.02, rng);
    nn::init_normal(
        store,
        "csdn.content_queries",
        &[cfg.n_content_queries, cfg.d_q],
        0.02,
        rng,
    );
    if cfg.d_enc != cfg.d_q {
        nn::init_linear(store, "csdn.fi_proj", cfg.d_enc, cfg.d_q, rng);
    }
    for b in 0..cfg.qformer_blocks {
        let p = format!("csdn.blk{b}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), cfg.d_q);
        nn::init_attention(store, &format!("{p}.self_attn"), cfg.d_q, rng);
        nn::init_layer_norm(store, &format!("{p}.ln_cross"), cfg.d_q);
        nn::init_attention(store, &format!("{p}.cross_attn"), cfg.d_q, rng);
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.d_q);
        nn::init_ffn(store, &format!("{p}.ffn"), cfg.d_q, cfg.d_q * 4, rng);
    }
    nn::init_linear(store, "proj.style", cfg.d_q, cfg.d_sd, rng);
    nn::init_linear(store, "proj.content", cfg.d_q, cfg.d_sd, rng);
}

fn cross_attends(cfg: &ModelConfig, block: usize) -> bool {
    cfg.cross_attention_every_block || block % 2 == 0
}

/// One pass of the querying transformer over `queries` (image mode:
/// cross-attention to `f_i` on the configured blocks).
fn run_qformer(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    mut x: Var,
    f_i: Option<Var>,
    key_mask: Option<&Array2<f64>>,
) -> Var {
    for b in 0..cfg.qformer_blocks {
        let p = format!("csdn.blk{b}");
        let n1 = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let attn = nn::multi_head_attention(
            g,
            store,
            &format!("{p}.self_attn"),
            n1,
            n1,
            cfg.qformer_heads,
            key_mask,
        );
        x = g.add(x, attn);
        if let Some(fi) = f_i {
            if cross_attends(cfg, b) {
                let nc = nn::layer_norm(g, store, &format!("{p}.ln_cross"), x);
                let cross = nn::multi_head_attention(
                    g,
                    store,
                    &format!("{p}.cross_attn"),
                    nc,
                    fi,
                    cfg.qformer_heads,
                    None,
                );
                x = g.add(x, cross);
            }
        }
        let n2 = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let f = nn::ffn(g, store, &format!("{p}.ffn"), n2);
        x = g.add(x, f);
    }
    x
}

/// Extract `I_s` and `I_c` from an image feature grid. Both banks are
/// concatenated into one sequence and processed jointly, then split by
/// index: rows `0..n_qs` are always the style block.
pub fn extract_visual_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    f_i: Var,
) -> Result<VisualQueries> {
    let got = g.shape(f_i)[1];
    if got != cfg.d_enc {
        return Err(Error::shape(format!("[*, {}]", cfg.d_enc), format!("[*, {got}]")));
    }
    let f_i = if cfg.d_enc != cfg.d_q {
        nn::linear(g, store, "csdn.fi_proj", f_i)
    } else {
        f_i
    };
    let style_q = g.param(store, "csdn.style_queries");
    let content_q = g.param(store, "csdn.content_queries");
    let n_qs = cfg.n_style_queries;
    let n_qc = cfg.n_content_queries;

    let (style_seq, content_seq) = if cfg.joint_query_pass {
        let joint = g.concat_rows(&[style_q, content_q]);
        let out = run_qformer(g, store, cfg, joint, Some(f_i), None);
        let s = g.slice_rows(out, 0, n_qs);
        let c = g.slice_rows(out, n_qs, n_qs + n_qc);
        (s, c)
    } else {
        let s = run_qformer(g, store, cfg, style_q, Some(f_i), None);
        let c = run_qformer(g, store, cfg, content_q, Some(f_i), None);
        (s, c)
    };
    let style_pooled = g.mean_rows(style_seq);
    let content_pooled = g.mean_rows(content_seq);
    Ok(VisualQueries {
        style_seq,
        content_seq,
        style_pooled,
        content_pooled,
    })
}

/// Frozen-weight wrapper over [`extract_visual_var`].
pub fn extract_visual(
    store: &ParamStore,
    cfg: &ModelConfig,
    f_i: &ImageFeatureGrid,
) -> Result<DisentangledEmbeddings> {
    let mut g = Graph::eval();
    let fv = g.constant2(f_i.features.clone());
    let q = extract_visual_var(&mut g, store, cfg, fv)?;
    Ok(DisentangledEmbeddings {
        style_seq: g.value2(q.style_seq).to_owned(),
        content_seq: g.value2(q.content_seq).to_owned(),
        style_pooled: g.value2(q.style_pooled).to_owned(),
        content_pooled: g.value2(q.content_pooled).to_owned(),
    })
}

/// Encode a text through the Q-Former text path (shared self-attention
/// and feed-forward, no cross-attention). PAD keys are masked out of the
/// attention and excluded from pooling, so trailing padding never changes
/// the result.
pub fn encode_text_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    tokens: &TokenSequence,
    mode: TextMode,
) -> Result<TextEmbedding> {
    let content_len = tokens.content_len();
    if content_len == 0 {
        return Err(Error::Tokenizer("all-PAD token sequence".into()));
    }
    let emb = encoders::embed_tokens(g, store, tokens)?;
    let mask = nn::key_padding_mask(tokens.len(), tokens.len(), content_len);
    let seq = run_qformer(g, store, cfg, emb, None, Some(&mask));
    let visible = g.slice_rows(seq, 0, content_len);
    let pooled = g.mean_rows(visible);
    Ok(TextEmbedding { pooled, seq, mode })
}

/// Arithmetic mean over rows; the pooling used for every query sequence.
pub fn pool(seq: &Array2<f64>) -> Result<Array2<f64>> {
    let (n, d) = seq.dim();
    if n == 0 {
        return Err(Error::InvalidArgument("pool of an empty sequence".into()));
    }
    let mut out = Array2::<f64>::zeros((1, d));
    for j in 0..d {
        out[[0, j]] = seq.column(j).sum() / n as f64;
    }
    Ok(out)
}

/// Row-wise affine map into the backbone width `d_sd`; style and content
/// have separate parameters.
pub fn project_for_backbone(
    g: &mut Graph,
    store: &ParamStore,
    e: Var,
    head: ProjectionHead,
) -> Result<Var> {
    let d_in = g.shape(e)[1];
    let w_shape = store.get(&format!("{}.w", head.prefix())).shape().to_vec();
    if d_in != w_shape[0] {
        return Err(Error::shape(format!("[*, {}]", w_shape[0]), format!("[*, {d_in}]")));
    }
    Ok(nn::linear(g, store, head.prefix(), e))
}
