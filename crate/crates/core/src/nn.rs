//! Layer builders over the autodiff graph, parameter initialization, and
//! the AdamW optimizer used by both training stages.

use indexmap::IndexMap;
use ndarray::{Array2, ArrayD};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{Graph, ParamStore, Var};

/// Gaussian init with the given std.
pub fn init_normal(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    std: f64,
    rng: &mut ChaCha12Rng,
) {
    let dist = Normal::new(0.0, std).unwrap();
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    store.insert(name, ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap());
}

pub fn init_zeros(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name, ArrayD::zeros(ndarray::IxDyn(shape)));
}

pub fn init_ones(store: &mut ParamStore, name: &str, shape: &[usize]) {
    store.insert(name, ArrayD::from_elem(ndarray::IxDyn(shape), 1.0));
}

/// Linear layer params: `{prefix}.w [in,out]` and `{prefix}.b [1,out]`,
/// weight std `1/sqrt(in)`.
pub fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha12Rng,
) {
    init_normal(
        store,
        &format!("{prefix}.w"),
        &[fan_in, fan_out],
        1.0 / (fan_in as f64).sqrt(),
        rng,
    );
    init_zeros(store, &format!("{prefix}.b"), &[1, fan_out]);
}

/// `y = x @ w + b`
pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let w = g.param(store, &format!("{prefix}.w"));
    let b = g.param(store, &format!("{prefix}.b"));
    let y = g.matmul(x, w);
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) {
    init_ones(store, &format!("{prefix}.g"), &[1, dim]);
    init_zeros(store, &format!("{prefix}.b"), &[1, dim]);
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let n = g.norm_rows(x, 1e-5);
    let gamma = g.param(store, &format!("{prefix}.g"));
    let beta = g.param(store, &format!("{prefix}.b"));
    let h = g.mul_row(n, gamma);
    g.add_row(h, beta)
}

/// Additive attention masks, `0` for visible and a large negative number
/// for hidden key positions.
pub const MASK_HIDDEN: f64 = -1e30;

/// Causal mask for a prefix-decoder: the first `n_prefix` rows/cols are a
/// fully-visible prefix, the remaining `n_tokens` positions attend to the
/// prefix and to earlier tokens only.
pub fn prefix_causal_mask(n_prefix: usize, n_tokens: usize) -> Array2<f64> {
    let n = n_prefix + n_tokens;
    let mut m = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let visible = if j < n_prefix { true } else { j <= i };
            if !visible {
                m[[i, j]] = MASK_HIDDEN;
            }
        }
    }
    m
}

/// Mask hiding key positions `>= visible_len` from every query.
pub fn key_padding_mask(n_queries: usize, n_keys: usize, visible_len: usize) -> Array2<f64> {
    let mut m = Array2::<f64>::zeros((n_queries, n_keys));
    for i in 0..n_queries {
        for j in visible_len..n_keys {
            m[[i, j]] = MASK_HIDDEN;
        }
    }
    m
}

/// Multi-head attention parameter block: `{prefix}.{wq,bq,wk,bk,wv,bv,wo,bo}`.
pub fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut ChaCha12Rng) {
    init_linear(store, &format!("{prefix}.q"), dim, dim, rng);
    init_linear(store, &format!("{prefix}.k"), dim, dim, rng);
    init_linear(store, &format!("{prefix}.v"), dim, dim, rng);
    init_linear(store, &format!("{prefix}.o"), dim, dim, rng);
}

/// Standard multi-head attention. `q_in` is `[n, d]`, `kv_in` is `[m, d]`;
/// the optional additive mask is `[n, m]`.
pub fn multi_head_attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    n_heads: usize,
    mask: Option<&Array2<f64>>,
) -> Var {
    let d = g.shape(q_in)[1];
    assert!(d % n_heads == 0, "dim {d} not divisible by heads {n_heads}");
    let dh = d / n_heads;
    let q = linear(g, store, &format!("{prefix}.q"), q_in);
    let k = linear(g, store, &format!("{prefix}.k"), kv_in);
    let v = linear(g, store, &format!("{prefix}.v"), kv_in);
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.mul_scalar(scores, scale);
        let attn = g.softmax_rows(scaled, mask.map(|m| m.clone().into_dyn()));
        heads.push(g.matmul(attn, vh));
    }
    let cat = g.concat_cols(&heads);
    linear(g, store, &format!("{prefix}.o"), cat)
}

pub fn init_ffn(store: &mut ParamStore, prefix: &str, dim: usize, hidden: usize, rng: &mut ChaCha12Rng) {
    init_linear(store, &format!("{prefix}.fc1"), dim, hidden, rng);
    init_linear(store, &format!("{prefix}.fc2"), hidden, dim, rng);
}

/// Two-layer GELU feed-forward.
pub fn ffn(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Var {
    let h = linear(g, store, &format!("{prefix}.fc1"), x);
    let a = g.gelu(h);
    linear(g, store, &format!("{prefix}.fc2"), a)
}

/// Sinusoidal embedding of a (possibly fractional) position, half sines
/// then half cosines, frequencies geometric from 1 to 1/10000.
pub fn sinusoidal_embedding(t: f64, dim: usize) -> Array2<f64> {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut out = Array2::<f64>::zeros((1, dim));
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        out[[0, i]] = (t * freq).sin();
        out[[0, half + i]] = (t * freq).cos();
    }
    out
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
/// Moment buffers are keyed by parameter name; only names accepted by the
/// `trainable` filter are updated or receive state.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub step: u64,
    pub m: IndexMap<String, ArrayD<f64>>,
    pub v: IndexMap<String, ArrayD<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, grad_clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Apply one update from `grads`. Parameters without a gradient entry
    /// are left untouched.
    pub fn apply(
        &mut self,
        store: &mut ParamStore,
        grads: &IndexMap<String, ArrayD<f64>>,
        trainable: impl Fn(&str) -> bool,
    ) {
        self.step += 1;
        let names: Vec<&String> = grads.keys().filter(|n| trainable(n)).collect();

        let mut norm_sq = 0.0;
        for name in &names {
            norm_sq += grads[*name].iter().map(|g| g * g).sum::<f64>();
        }
        let norm = norm_sq.sqrt();
        let clip_scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };

        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for name in names {
            let g = &grads[name] * clip_scale;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *m = &*m * self.beta1 + &g * (1.0 - self.beta1);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(g.raw_dim()));
            *v = &*v * self.beta2 + &(&g * &g) * (1.0 - self.beta2);

            let m_hat = &*m / bc1;
            let v_hat = &*v / bc2;
            let p = store.get_mut(name);
            let update = &m_hat / &v_hat.mapv(|x| x.sqrt() + self.eps) + &*p * self.weight_decay;
            *p -= &(update * self.lr);
        }
    }
}

/// Convenience: sample a `[n, d]` standard normal matrix.
pub fn randn(rng: &mut ChaCha12Rng, n: usize, d: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_fn((n, d), |_| dist.sample(rng))
}

/// Uniform integer in `[0, n)` drawn from the shared rng.
pub fn rand_index(rng: &mut ChaCha12Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}
