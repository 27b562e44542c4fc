//! The three alignment losses and their sum: image-text contrastive (ITC),
//! image-text matching (ITM), and image-grounded text generation (ITG),
//! applied once for style and once for content. Also the lightweight
//! causal prefix decoder that ITG trains.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::csdn::{self, TextMode};
use crate::dataset::TripletBatch;
use crate::encoders::{self, TokenSequence, PAD, VOCAB_SIZE};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::nn;

/// Which ITM classifier a pair batch belongs to. Style and content have
/// separate classifiers, matching the separate loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItmHead {
    Style,
    Content,
}

impl ItmHead {
    fn prefix(self) -> &'static str {
        match self {
            ItmHead::Style => "itm.style",
            ItmHead::Content => "itm.content",
        }
    }
}

/// One image-text pair with its match label.
#[derive(Debug, Clone)]
pub struct MatchPair {
    pub image_embedding: Array1<f64>,
    pub text_embedding: Array1<f64>,
    pub label: bool,
}

/// Index-level pairing into a pooled batch: `labels[i]` says whether
/// `image_idx[i]` and `text_idx[i]` are an aligned pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSet {
    pub image_idx: Vec<usize>,
    pub text_idx: Vec<usize>,
    pub labels: Vec<bool>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Register the two ITM classifiers and the ITG decoder.
pub fn init_losses(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) {
    for head in ["itm.style", "itm.content"] {
        nn::init_normal(store, &format!("{head}.w"), &[1, 1], 1.0, rng);
        nn::init_zeros(store, &format!("{head}.b"), &[1, 1]);
    }
    for b in 0..cfg.itg_blocks {
        let p = format!("itg.blk{b}");
        nn::init_layer_norm(store, &format!("{p}.ln1"), cfg.d_q);
        nn::init_attention(store, &format!("{p}.attn"), cfg.d_q, rng);
        nn::init_layer_norm(store, &format!("{p}.ln2"), cfg.d_q);
        nn::init_ffn(store, &format!("{p}.ffn"), cfg.d_q, cfg.d_q * 4, rng);
    }
    nn::init_linear(store, "itg.head.fc", cfg.d_q, cfg.d_q, rng);
    nn::init_layer_norm(store, "itg.head.ln", cfg.d_q);
    nn::init_linear(store, "itg.vocab", cfg.d_q, VOCAB_SIZE, rng);
}

fn check_no_zero_rows(g: &Graph, v: Var, what: &str) -> Result<()> {
    for row in g.value2(v).rows() {
        let norm: f64 = row.iter().map(|x| x * x).sum::<f64>();
        if norm.sqrt() < 1e-9 {
            return Err(Error::InvalidArgument(format!("zero-norm embedding in {what}")));
        }
    }
    Ok(())
}

/// Symmetric InfoNCE over cosine similarities scaled by `1/tau`:
/// `L = -(1/N) Σ_n [log softmax-row_n + log softmax-col_n]`, diagonal
/// pairs positive.
pub fn itc_loss_var(
    g: &mut Graph,
    image_pooled: Var,
    text_pooled: Var,
    tau: f64,
) -> Result<Var> {
    let n = g.shape(image_pooled)[0];
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "contrastive loss needs a batch of at least 2, got {n}"
        )));
    }
    if g.shape(text_pooled)[0] != n {
        return Err(Error::shape(format!("[{n}, *]"), format!("{:?}", g.shape(text_pooled))));
    }
    if tau <= 0.0 {
        return Err(Error::InvalidArgument("tau must be positive".into()));
    }
    check_no_zero_rows(g, image_pooled, "itc image batch")?;
    check_no_zero_rows(g, text_pooled, "itc text batch")?;

    let img_n = g.l2_normalize_rows(image_pooled, 1e-12);
    let txt_n = g.l2_normalize_rows(text_pooled, 1e-12);
    let txt_t = g.transpose(txt_n);
    let sims = g.matmul(img_n, txt_t);
    let logits = g.mul_scalar(sims, 1.0 / tau);
    let logits_t = g.transpose(logits);

    let diag: Vec<usize> = (0..n).collect();
    let ones = vec![1.0; n];
    let row_ce = g.cross_entropy_rows(logits, &diag, &ones);
    let col_ce = g.cross_entropy_rows(logits_t, &diag, &ones);
    let total = g.add(row_ce, col_ce);
    Ok(g.mul_scalar(total, 1.0 / n as f64))
}

/// Plain-value convenience wrapper over [`itc_loss_var`].
pub fn itc_loss(image_pooled: &Array2<f64>, text_pooled: &Array2<f64>, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let i = g.constant2(image_pooled.clone());
    let t = g.constant2(text_pooled.clone());
    let l = itc_loss_var(&mut g, i, t, tau)?;
    Ok(g.scalar(l))
}

/// N positives (aligned rows) plus N negatives from a random cyclic
/// derangement of the text rows, so a negative never pairs row i with
/// text i.
pub fn sample_itm_pairs(n: usize, rng: &mut ChaCha12Rng) -> Result<PairSet> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rows to sample negatives, got {n}"
        )));
    }
    // Sattolo's algorithm: uniform over cyclic permutations, which have
    // no fixed points.
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..i);
        perm.swap(i, j);
    }
    let mut image_idx = Vec::with_capacity(2 * n);
    let mut text_idx = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(2 * n);
    for i in 0..n {
        image_idx.push(i);
        text_idx.push(i);
        labels.push(true);
    }
    for (i, &j) in perm.iter().enumerate() {
        image_idx.push(i);
        text_idx.push(j);
        labels.push(false);
    }
    Ok(PairSet {
        image_idx,
        text_idx,
        labels,
    })
}

/// ITM core: cosine similarity per pair, a learned scalar linear layer to
/// a logit, sigmoid probability, mean binary cross-entropy.
fn itm_loss_inner(
    g: &mut Graph,
    store: &ParamStore,
    head: ItmHead,
    image_rows: Var,
    text_rows: Var,
    labels: &[bool],
) -> Result<Var> {
    check_no_zero_rows(g, image_rows, "itm image rows")?;
    check_no_zero_rows(g, text_rows, "itm text rows")?;
    let img_n = g.l2_normalize_rows(image_rows, 1e-12);
    let txt_n = g.l2_normalize_rows(text_rows, 1e-12);
    let cos = g.row_dot(img_n, txt_n); // [p, 1]

    let w = g.param(store, &format!("{}.w", head.prefix()));
    let b = g.param(store, &format!("{}.b", head.prefix()));
    let scaled = g.mul_scalar_var(cos, w);
    let logits = g.add_scalar_var(scaled, b);

    // BCE from logits: softplus(z) - y*z, mean over pairs
    let y = Array2::from_shape_fn((labels.len(), 1), |(i, _)| f64::from(labels[i]));
    let yv = g.constant2(y);
    let sp = g.softplus(logits);
    let yz = g.mul(yv, logits);
    let per_pair = g.sub(sp, yz);
    Ok(g.mean_all(per_pair))
}

/// ITM over an index pairing into pooled batches (training path; keeps
/// gradients flowing to the embeddings).
pub fn itm_loss_var(
    g: &mut Graph,
    store: &ParamStore,
    head: ItmHead,
    image_pooled: Var,
    text_pooled: Var,
    pairs: &PairSet,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair set".into()));
    }
    let gather_rows = |g: &mut Graph, src: Var, idx: &[usize]| {
        let rows: Vec<Var> = idx.iter().map(|&i| g.slice_rows(src, i, i + 1)).collect();
        g.concat_rows(&rows)
    };
    let image_rows = gather_rows(g, image_pooled, &pairs.image_idx);
    let text_rows = gather_rows(g, text_pooled, &pairs.text_idx);
    itm_loss_inner(g, store, head, image_rows, text_rows, &pairs.labels)
}

/// ITM over explicit pairs, frozen-weight value form.
pub fn itm_loss(store: &ParamStore, head: ItmHead, pairs: &[MatchPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty pair list".into()));
    }
    let d = pairs[0].image_embedding.len();
    let mut img = Array2::<f64>::zeros((pairs.len(), d));
    let mut txt = Array2::<f64>::zeros((pairs.len(), d));
    let mut labels = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        img.row_mut(i).assign(&p.image_embedding);
        txt.row_mut(i).assign(&p.text_embedding);
        labels.push(p.label);
    }
    let mut g = Graph::new();
    let iv = g.constant2(img);
    let tv = g.constant2(txt);
    let l = itm_loss_inner(&mut g, store, head, iv, tv, &labels)?;
    Ok(g.scalar(l))
}

/// Match probabilities for inspection: sigmoid of the learned logit.
pub fn itm_probabilities(store: &ParamStore, head: ItmHead, pairs: &[MatchPair]) -> Result<Vec<f64>> {
    let w = store.get(&format!("{}.w", head.prefix()))[[0, 0]];
    let b = store.get(&format!("{}.b", head.prefix()))[[0, 0]];
    pairs
        .iter()
        .map(|p| {
            let ni = p.image_embedding.dot(&p.image_embedding).sqrt();
            let nt = p.text_embedding.dot(&p.text_embedding).sqrt();
            if ni < 1e-9 || nt < 1e-9 {
                return Err(Error::InvalidArgument("zero-norm embedding".into()));
            }
            let cos = p.image_embedding.dot(&p.text_embedding) / (ni * nt);
            let z = w * cos + b;
            Ok(1.0 / (1.0 + (-z).exp()))
        })
        .collect()
}

/// ITG loss for one sequence: sum of next-token cross-entropies over
/// non-PAD targets, plus the target count for mean-per-token logging.
pub struct ItgOutput {
    pub sum: Var,
    pub n_targets: usize,
}

impl ItgOutput {
    pub fn mean_per_token(&self, g: &Graph) -> f64 {
        g.scalar(self.sum) / self.n_targets as f64
    }
}

/// Teacher-forced next-token prediction from a query prefix: the decoder
/// runs over `[prefix; token embeddings]` with a causal mask (prefix
/// visible everywhere), a transformation head (dense projection, GELU,
/// layer norm), and a vocabulary projection.
pub fn itg_loss_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: Var,
    tokens: &TokenSequence,
) -> Result<ItgOutput> {
    let m = tokens.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!(
            "ITG needs at least 2 tokens (BOS + target), got {m}"
        )));
    }
    let n_prefix = g.shape(prefix)[0];
    let emb = encoders::embed_tokens(g, store, tokens)?;
    let mut x = g.concat_rows(&[prefix, emb]);
    let mask = nn::prefix_causal_mask(n_prefix, m);
    for b in 0..cfg.itg_blocks {
        let p = format!("itg.blk{b}");
        let n1 = nn::layer_norm(g, store, &format!("{p}.ln1"), x);
        let attn = nn::multi_head_attention(
            g,
            store,
            &format!("{p}.attn"),
            n1,
            n1,
            cfg.qformer_heads,
            Some(&mask),
        );
        x = g.add(x, attn);
        let n2 = nn::layer_norm(g, store, &format!("{p}.ln2"), x);
        let f = nn::ffn(g, store, &format!("{p}.ffn"), n2);
        x = g.add(x, f);
    }
    // hidden states at token positions 0..m-1 predict tokens 1..m
    let hidden = g.slice_rows(x, n_prefix, n_prefix + m - 1);
    let dense = nn::linear(g, store, "itg.head.fc", hidden);
    let act = g.gelu(dense);
    let normed = nn::layer_norm(g, store, "itg.head.ln", act);
    let logits = nn::linear(g, store, "itg.vocab", normed);

    let targets: Vec<usize> = tokens.ids[1..].to_vec();
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t == PAD { 0.0 } else { 1.0 })
        .collect();
    let n_targets = weights.iter().filter(|&&w| w > 0.0).count();
    if n_targets == 0 {
        return Err(Error::InvalidArgument("no non-PAD targets".into()));
    }
    let sum = g.cross_entropy_rows(logits, &targets, &weights);
    Ok(ItgOutput { sum, n_targets })
}

/// Greedy decode from a prefix, for inspecting what the ITG decoder has
/// learned. Inference-only helper; training never samples.
pub fn itg_greedy_decode(
    store: &ParamStore,
    cfg: &ModelConfig,
    prefix: &Array2<f64>,
    max_tokens: usize,
) -> Result<String> {
    let mut ids = vec![encoders::BOS];
    for _ in 0..max_tokens {
        let mut g = Graph::eval();
        let pv = g.constant2(prefix.clone());
        let tokens = TokenSequence { ids: ids.clone() };
        let emb = encoders::embed_tokens(&mut g, store, &tokens)?;
        let mut x = g.concat_rows(&[pv, emb]);
        let mask = nn::prefix_causal_mask(prefix.dim().0, ids.len());
        for b in 0..cfg.itg_blocks {
            let p = format!("itg.blk{b}");
            let n1 = nn::layer_norm(&mut g, store, &format!("{p}.ln1"), x);
            let attn = nn::multi_head_attention(
                &mut g,
                store,
                &format!("{p}.attn"),
                n1,
                n1,
                cfg.qformer_heads,
                Some(&mask),
            );
            x = g.add(x, attn);
            let n2 = nn::layer_norm(&mut g, store, &format!("{p}.ln2"), x);
            let f = nn::ffn(&mut g, store, &format!("{p}.ffn"), n2);
            x = g.add(x, f);
        }
        let last = g.shape(x)[0];
        let hidden = g.slice_rows(x, last - 1, last);
        let dense = nn::linear(&mut g, store, "itg.head.fc", hidden);
        let act = g.gelu(dense);
        let normed = nn::layer_norm(&mut g, store, "itg.head.ln", act);
        let logits = nn::linear(&mut g, store, "itg.vocab", normed);
        let row = g.value2(logits);
        let next = (0..VOCAB_SIZE)
            .max_by(|&a, &b| row[[0, a]].partial_cmp(&row[[0, b]]).unwrap())
            .unwrap();
        if next == encoders::EOS || next == PAD {
            break;
        }
        ids.push(next);
    }
    Ok(encoders::detokenize(&TokenSequence { ids }))
}

/// Per-term breakdown of the combined disentanglement objective.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct DisentangleBreakdown {
    pub itc_s: f64,
    pub itm_s: f64,
    pub itg_s: f64,
    pub itc_c: f64,
    pub itm_c: f64,
    pub itg_c: f64,
    pub l_s: f64,
    pub l_c: f64,
    pub total: f64,
}

/// The combined objective: `L = L_s + L_c` with
/// `L_s = ITC(I_s,T_s) + ITM(style pairs) + ITG(style text | I_s_seq)`
/// and the analogous content terms. ITG is a per-token sum averaged over
/// the batch; ITC and ITM are batch means.
pub fn disentangle_loss_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    tau: f64,
    batch: &TripletBatch,
    rng: &mut ChaCha12Rng,
) -> Result<(Var, DisentangleBreakdown)> {
    let n = batch.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "disentangle loss needs a batch of at least 2, got {n}"
        )));
    }

    let mut img_style = Vec::with_capacity(n);
    let mut img_content = Vec::with_capacity(n);
    let mut txt_style = Vec::with_capacity(n);
    let mut txt_content = Vec::with_capacity(n);
    let mut itg_style_sum: Option<Var> = None;
    let mut itg_content_sum: Option<Var> = None;

    for i in 0..n {
        let f_i = encoders::encode_image_var(g, store, cfg, &batch.images[i])?;
        let vq = csdn::extract_visual_var(g, store, cfg, f_i)?;
        img_style.push(vq.style_pooled);
        img_content.push(vq.content_pooled);

        let style_tokens = encoders::tokenize(&batch.style_texts[i].rendered, cfg.text_max_len)?;
        let content_tokens = encoders::tokenize(&batch.content_texts[i], cfg.text_max_len)?;
        let ts = csdn::encode_text_var(g, store, cfg, &style_tokens, TextMode::Style)?;
        let tc = csdn::encode_text_var(g, store, cfg, &content_tokens, TextMode::Content)?;
        txt_style.push(ts.pooled);
        txt_content.push(tc.pooled);

        let itg_s = itg_loss_var(g, store, cfg, vq.style_seq, &style_tokens)?;
        let itg_c = itg_loss_var(g, store, cfg, vq.content_seq, &content_tokens)?;
        itg_style_sum = Some(match itg_style_sum {
            Some(acc) => g.add(acc, itg_s.sum),
            None => itg_s.sum,
        });
        itg_content_sum = Some(match itg_content_sum {
            Some(acc) => g.add(acc, itg_c.sum),
            None => itg_c.sum,
        });
    }

    let i_s = g.concat_rows(&img_style);
    let i_c = g.concat_rows(&img_content);
    let t_s = g.concat_rows(&txt_style);
    let t_c = g.concat_rows(&txt_content);

    let itc_s = itc_loss_var(g, i_s, t_s, tau)?;
    let itc_c = itc_loss_var(g, i_c, t_c, tau)?;

    let pairs_s = sample_itm_pairs(n, rng)?;
    let pairs_c = sample_itm_pairs(n, rng)?;
    let itm_s = itm_loss_var(g, store, ItmHead::Style, i_s, t_s, &pairs_s)?;
    let itm_c = itm_loss_var(g, store, ItmHead::Content, i_c, t_c, &pairs_c)?;

    let itg_s = g.mul_scalar(itg_style_sum.unwrap(), 1.0 / n as f64);
    let itg_c = g.mul_scalar(itg_content_sum.unwrap(), 1.0 / n as f64);

    let s1 = g.add(itc_s, itm_s);
    let l_s = g.add(s1, itg_s);
    let c1 = g.add(itc_c, itm_c);
    let l_c = g.add(c1, itg_c);
    let total = g.add(l_s, l_c);

    let breakdown = DisentangleBreakdown {
        itc_s: g.scalar(itc_s),
        itm_s: g.scalar(itm_s),
        itg_s: g.scalar(itg_s),
        itc_c: g.scalar(itc_c),
        itm_c: g.scalar(itm_c),
        itg_c: g.scalar(itg_c),
        l_s: g.scalar(l_s),
        l_c: g.scalar(l_c),
        total: g.scalar(total),
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use ndarray::arr2;
    use rand::SeedableRng;

    fn store_with_losses(seed: u64) -> (ParamStore, ModelConfig) {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        encoders::init_encoders(&mut store, &cfg, &mut rng);
        init_losses(&mut store, &cfg, &mut rng);
        (store, cfg)
    }

    #[test]
    fn itc_hand_derived_two_sample_value() {
        let img = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let txt = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let loss = itc_loss(&img, &txt, 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!(
            (loss - expected).abs() < 1e-9,
            "got {loss}, want {expected}"
        );
        assert!((expected - 0.62652).abs() < 1e-4);
    }

    #[test]
    fn itc_saturates_to_zero_at_small_tau() {
        let img = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        let loss = itc_loss(&img, &img, 1e-3).unwrap();
        assert!(loss.abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn itc_errors() {
        let one = arr2(&[[1.0, 0.0]]);
        assert!(itc_loss(&one, &one, 1.0).is_err()); // N < 2
        let with_zero = arr2(&[[1.0, 0.0], [0.0, 0.0]]);
        let ok = arr2(&[[1.0, 0.0], [0.0, 1.0]]);
        assert!(itc_loss(&with_zero, &ok, 1.0).is_err());
        assert!(itc_loss(&ok, &ok, 0.0).is_err());
    }

    #[test]
    fn itc_symmetry_and_scale_invariance() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        for _ in 0..20 {
            let a = randn(&mut rng, 4, 6);
            let b = randn(&mut rng, 4, 6);
            let tau = 0.3;
            let ab = itc_loss(&a, &b, tau).unwrap();
            let ba = itc_loss(&b, &a, tau).unwrap();
            assert!((ab - ba).abs() < 1e-9, "symmetry violated: {ab} vs {ba}");

            let mut scaled = a.clone();
            for v in scaled.row_mut(2).iter_mut() {
                *v *= 7.3;
            }
            let sc = itc_loss(&scaled, &b, tau).unwrap();
            assert!((ab - sc).abs() < 1e-9, "scale invariance violated");
        }
    }

    #[test]
    fn itm_extreme_predictions() {
        let (mut store, _) = store_with_losses(1);
        // force the classifier to produce an enormous logit on cos=1
        *store.get_mut("itm.style.w") = arr2(&[[500.0]]).into_dyn();
        *store.get_mut("itm.style.b") = arr2(&[[0.0]]).into_dyn();
        let aligned = MatchPair {
            image_embedding: ndarray::arr1(&[1.0, 0.0]),
            text_embedding: ndarray::arr1(&[1.0, 0.0]),
            label: true,
        };
        let loss = itm_loss(&store, ItmHead::Style, &[aligned.clone()]).unwrap();
        assert!(loss < 1e-12, "saturated positive should have ~0 loss, got {loss}");
        let p = itm_probabilities(&store, ItmHead::Style, &[aligned]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);

        // probability 1/2 → ln 2
        *store.get_mut("itm.style.w") = arr2(&[[0.0]]).into_dyn();
        let pair = MatchPair {
            image_embedding: ndarray::arr1(&[1.0, 0.0]),
            text_embedding: ndarray::arr1(&[0.0, 1.0]),
            label: false,
        };
        let loss = itm_loss(&store, ItmHead::Style, &[pair]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn itm_probability_bounds_and_nonnegative_loss() {
        let (store, _) = store_with_losses(2);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..30 {
            let pairs: Vec<MatchPair> = (0..4)
                .map(|i| MatchPair {
                    image_embedding: randn(&mut rng, 1, 6).row(0).to_owned(),
                    text_embedding: randn(&mut rng, 1, 6).row(0).to_owned(),
                    label: i % 2 == 0,
                })
                .collect();
            let probs = itm_probabilities(&store, ItmHead::Content, &pairs).unwrap();
            assert!(probs.iter().all(|&p| p > 0.0 && p < 1.0));
            let loss = itm_loss(&store, ItmHead::Content, &pairs).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn pair_sampling_contract() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let p = sample_itm_pairs(2, &mut rng).unwrap();
        assert_eq!(p.len(), 4);
        assert_eq!(p.labels.iter().filter(|&&l| l).count(), 2);
        assert!(sample_itm_pairs(1, &mut rng).is_err());

        // negatives never align, across many seeds
        for seed in 0..200 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            for n in 2..6 {
                let p = sample_itm_pairs(n, &mut rng).unwrap();
                for i in 0..p.len() {
                    if !p.labels[i] {
                        assert_ne!(p.image_idx[i], p.text_idx[i]);
                    }
                }
            }
        }

        // fixed seed → identical pairing
        let a = sample_itm_pairs(5, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        let b = sample_itm_pairs(5, &mut ChaCha12Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn itg_uniform_logits_give_ln_vocab() {
        let (mut store, cfg) = store_with_losses(5);
        // zero the vocab projection → uniform distribution over 259 symbols
        *store.get_mut("itg.vocab.w") =
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[cfg.d_q, VOCAB_SIZE]));
        *store.get_mut("itg.vocab.b") = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, VOCAB_SIZE]));

        let tokens = encoders::tokenize("hello", cfg.text_max_len).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let prefix = randn(&mut rng, 4, cfg.d_q);
        let mut g = Graph::new();
        let pv = g.constant2(prefix);
        let out = itg_loss_var(&mut g, &store, &cfg, pv, &tokens).unwrap();
        let per_token = out.mean_per_token(&g);
        let expected = (VOCAB_SIZE as f64).ln();
        assert!((per_token - expected).abs() < 1e-9, "{per_token} vs {expected}");
        assert_eq!(out.n_targets, tokens.len() - 1);
    }

    #[test]
    fn itg_saturated_logits_give_zero() {
        let (mut store, cfg) = store_with_losses(7);
        // bias the vocab head so the true next token always wins by a
        // huge margin: requires knowing the targets, so use a two-token
        // sequence "a" → targets are ['a', EOS]... instead craft bias per
        // test by pointing every position at the same target token 'a'.
        let tokens = TokenSequence {
            ids: vec![encoders::BOS, 97, 97, 97],
        };
        *store.get_mut("itg.vocab.w") =
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[cfg.d_q, VOCAB_SIZE]));
        let mut bias = Array2::<f64>::zeros((1, VOCAB_SIZE));
        bias[[0, 97]] = 1e4;
        *store.get_mut("itg.vocab.b") = bias.into_dyn();

        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let prefix = randn(&mut rng, 4, cfg.d_q);
        let mut g = Graph::new();
        let pv = g.constant2(prefix);
        let out = itg_loss_var(&mut g, &store, &cfg, pv, &tokens).unwrap();
        assert!(g.scalar(out.sum) < 1e-9);
    }

    #[test]
    fn itg_requires_two_tokens() {
        let (store, cfg) = store_with_losses(9);
        let tokens = TokenSequence { ids: vec![encoders::BOS] };
        let mut g = Graph::new();
        let pv = g.constant2(Array2::zeros((4, cfg.d_q)));
        assert!(itg_loss_var(&mut g, &store, &cfg, pv, &tokens).is_err());
    }

    #[test]
    fn itg_causality() {
        // perturbing token k changes predictions only for positions > k
        let (store, cfg) = store_with_losses(10);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let prefix = randn(&mut rng, 4, cfg.d_q);

        let base_tokens = encoders::tokenize("abcdef", cfg.text_max_len).unwrap();
        let mut perturbed = base_tokens.clone();
        let k = 3; // position of 'c'
        perturbed.ids[k] = 120; // 'x'

        let logits_for = |tokens: &TokenSequence| {
            let mut g = Graph::new();
            let pv = g.constant2(prefix.clone());
            let emb = encoders::embed_tokens(&mut g, &store, tokens).unwrap();
            let mut x = g.concat_rows(&[pv, emb]);
            let mask = nn::prefix_causal_mask(4, tokens.len());
            for b in 0..cfg.itg_blocks {
                let p = format!("itg.blk{b}");
                let n1 = nn::layer_norm(&mut g, &store, &format!("{p}.ln1"), x);
                let attn = nn::multi_head_attention(
                    &mut g, &store, &format!("{p}.attn"), n1, n1, cfg.qformer_heads, Some(&mask),
                );
                x = g.add(x, attn);
                let n2 = nn::layer_norm(&mut g, &store, &format!("{p}.ln2"), x);
                let f = nn::ffn(&mut g, &store, &format!("{p}.ffn"), n2);
                x = g.add(x, f);
            }
            let hidden = g.slice_rows(x, 4, 4 + tokens.len() - 1);
            let dense = nn::linear(&mut g, &store, "itg.head.fc", hidden);
            let act = g.gelu(dense);
            let normed = nn::layer_norm(&mut g, &store, "itg.head.ln", act);
            let logits = nn::linear(&mut g, &store, "itg.vocab", normed);
            g.value2(logits).to_owned()
        };
        let a = logits_for(&base_tokens);
        let b = logits_for(&perturbed);
        // rows 0..k predict from tokens < k only → identical
        for i in 0..k {
            for j in 0..VOCAB_SIZE {
                assert_eq!(a[[i, j]].to_bits(), b[[i, j]].to_bits(), "row {i} changed");
            }
        }
        // some later row must differ
        let mut changed = false;
        for i in k..a.dim().0 {
            for j in 0..VOCAB_SIZE {
                if a[[i, j]] != b[[i, j]] {
                    changed = true;
                }
            }
        }
        assert!(changed);
    }
}
