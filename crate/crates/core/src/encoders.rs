//! Image feature extraction and the byte-level text front end shared by
//! every text path.
//!
//! The image encoder is a small patch-embedding + self-attention stack
//! trained jointly in stage 1. Externally computed feature grids can be
//! substituted through [`FeatureGridSource`].

use ndarray::{Array2, Array3};
use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn;

pub const VOCAB_SIZE: usize = 259;
pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;

/// Token ids with BOS first, EOS terminating the content, PAD trailing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of non-PAD positions.
    pub fn content_len(&self) -> usize {
        self.ids.iter().position(|&id| id == PAD).unwrap_or(self.ids.len())
    }

    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
        }
    }
}

/// Byte-level tokenization: UTF-8 bytes as ids 0..=255 plus the three
/// specials. Truncation keeps the final EOS.
pub fn tokenize(text: &str, max_len: usize) -> Result<TokenSequence> {
    assert!(max_len >= 3, "max_len must fit BOS + byte + EOS");
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(Error::Tokenizer("empty text".into()));
    }
    let bytes = trimmed.as_bytes();
    let keep = bytes.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(keep + 2);
    ids.push(BOS);
    ids.extend(bytes[..keep].iter().map(|&b| b as usize));
    ids.push(EOS);
    Ok(TokenSequence { ids })
}

/// Inverse of [`tokenize`] up to trimming and truncation.
pub fn detokenize(tokens: &TokenSequence) -> String {
    let bytes: Vec<u8> = tokens
        .ids
        .iter()
        .filter(|&&id| id < 256)
        .map(|&id| id as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Register the shared token-embedding table, positional table, and the
/// image encoder parameters under the `encoders.*` namespace.
pub fn init_encoders(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) {
    nn::init_normal(store, "encoders.token_table", &[VOCAB_SIZE, cfg.d_q], 0.02, rng);
    nn::init_normal(store, "encoders.token_pos", &[cfg.text_max_len, cfg.d_q], 0.02, rng);

    let patch_dim = cfg.in_channels * cfg.patch_size * cfg.patch_size;
    let n_patches = (cfg.image_size / cfg.patch_size).pow(2);
    nn::init_linear(store, "encoders.image.patch", patch_dim, cfg.d_enc, rng);
    nn::init_normal(store, "encoders.image.pos", &[n_patches, cfg.d_enc], 0.02, rng);
    for b in 0..cfg.image_encoder_blocks {
        let p = format!("encoders.image.blk{b}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), cfg.d_enc);
        nn::init_attention(store, &format!("{p}.attn"), cfg.d_enc, rng);
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.d_enc);
        nn::init_ffn(store, &format!("{p}.ffn"), cfg.d_enc, cfg.d_enc * 4, rng);
    }
    nn::init_layer_norm(store, "encoders.image.out_ln", cfg.d_enc);
}

/// Cut `[c,s,s]` into non-overlapping patches, row-major over the patch
/// grid, giving `[n_patches, c*p*p]`.
pub fn patchify(image: &Array3<f64>, patch: usize) -> Result<Array2<f64>> {
    let (c, h, w) = image.dim();
    if h != w || h % patch != 0 {
        return Err(Error::shape(
            format!("square image with side divisible by {patch}"),
            format!("[{c},{h},{w}]"),
        ));
    }
    let side = h / patch;
    let mut out = Array2::<f64>::zeros((side * side, c * patch * patch));
    for py in 0..side {
        for px in 0..side {
            let row = py * side + px;
            for ci in 0..c {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[[row, (ci * patch + dy) * patch + dx]] =
                            image[[ci, py * patch + dy, px * patch + dx]];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Image features `F_I`: `[n_patches, d_enc]` plus the dims, as produced
/// by [`encode_image`] or an external source.
#[derive(Debug, Clone)]
pub struct ImageFeatureGrid {
    pub features: Array2<f64>,
}

impl ImageFeatureGrid {
    pub fn n_patches(&self) -> usize {
        self.features.dim().0
    }

    pub fn d_enc(&self) -> usize {
        self.features.dim().1
    }
}

/// Anything that can stand in for the image encoder, e.g. feature grids
/// computed offline by a full-scale pretrained model.
pub trait FeatureGridSource {
    fn features(&self, image: &Array3<f64>) -> Result<ImageFeatureGrid>;
}

/// Graph-side image encoding; differentiable through `encoders.image.*`.
pub fn encode_image_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Array3<f64>,
) -> Result<Var> {
    let patches = patchify(image, cfg.patch_size)?;
    let pv = g.constant2(patches);
    let mut x = nn::linear(g, store, "encoders.image.patch", pv);
    let pos = g.param(store, "encoders.image.pos");
    x = g.add(x, pos);
    for b in 0..cfg.image_encoder_blocks {
        let p = format!("encoders.image.blk{b}");
        let n1 = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let attn = nn::multi_head_attention(
            g,
            store,
            &format!("{p}.attn"),
            n1,
            n1,
            cfg.qformer_heads,
            None,
        );
        x = g.add(x, attn);
        let n2 = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let f = nn::ffn(g, store, &format!("{p}.ffn"), n2);
        x = g.add(x, f);
    }
    Ok(nn::layer_norm(g, store, "encoders.image.out_ln", x))
}

/// Frozen-weight convenience wrapper returning a plain feature grid.
pub fn encode_image(
    store: &ParamStore,
    cfg: &ModelConfig,
    image: &Array3<f64>,
) -> Result<ImageFeatureGrid> {
    let mut g = Graph::eval();
    let v = encode_image_var(&mut g, store, cfg, image)?;
    Ok(ImageFeatureGrid {
        features: g.value2(v).to_owned(),
    })
}

/// Built-in encoder as a [`FeatureGridSource`].
pub struct BuiltinImageEncoder<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl FeatureGridSource for BuiltinImageEncoder<'_> {
    fn features(&self, image: &Array3<f64>) -> Result<ImageFeatureGrid> {
        encode_image(self.store, self.cfg, image)
    }
}

/// Token embeddings: table row per id plus the learned positional row,
/// `[len, d_q]`.
pub fn embed_tokens(g: &mut Graph, store: &ParamStore, tokens: &TokenSequence) -> Result<Var> {
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id >= VOCAB_SIZE) {
        return Err(Error::Tokenizer(format!("token id {bad} out of range")));
    }
    let max_len = store.get("encoders.token_pos").shape()[0];
    if tokens.len() > max_len {
        return Err(Error::Tokenizer(format!(
            "sequence length {} exceeds max_len {max_len}",
            tokens.len()
        )));
    }
    let table = g.param(store, "encoders.token_table");
    let emb = g.gather(table, &tokens.ids);
    let pos_table = g.param(store, "encoders.token_pos");
    let pos = g.slice_rows(pos_table, 0, tokens.len());
    Ok(g.add(emb, pos))
}
