//! Toy latent denoising backbone: a 3-level encoder/decoder with skip
//! connections, one MCL layer on each down/up level and one in the middle
//! block (the only place style enters). Timesteps are injected through a
//! sinusoidal embedding.
//!
//! Geometry at the default config: 16x16 -> 8x8 -> 4x4 with channel
//! widths (32, 64, 128); MCL layers `mcl.down0`, `mcl.down1`, `mcl.mid`,
//! `mcl.up1`, `mcl.up0`.

use ndarray::{Array2, Array4};
use rand_chacha::ChaCha12Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::mcl::{self, BlockRole, ConditionPack, ConditionVars};
use crate::nn;
use crate::schedule::{draw_noise, NoisePredictor, NoiseSchedule};

/// Names and roles of every MCL layer in the backbone, in forward order.
pub const MCL_LAYERS: [(&str, BlockRole); 5] = [
    ("mcl.down0", BlockRole::Down),
    ("mcl.down1", BlockRole::Down),
    ("mcl.mid", BlockRole::Middle),
    ("mcl.up1", BlockRole::Up),
    ("mcl.up0", BlockRole::Up),
];

#[derive(Debug, Clone, Copy, Default)]
pub struct UnetOptions {
    /// Skip the middle-block MCL layer entirely (ablation).
    pub ablate_middle_mcl: bool,
}

/// Captured per-layer MCL outputs: `(layer name, sample index, tokens)`.
#[derive(Debug, Default)]
pub struct MclProbe {
    pub outputs: Vec<(String, usize, Array2<f64>)>,
}

fn init_conv(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut ChaCha12Rng) {
    let fan_in = cin * k * k;
    nn::init_normal(store, &format!("{name}.w"), &[cout, fan_in], 1.0 / (fan_in as f64).sqrt(), rng);
    nn::init_zeros(store, &format!("{name}.b"), &[1, cout]);
}

fn init_chan_norm(store: &mut ParamStore, name: &str, c: usize) {
    nn::init_ones(store, &format!("{name}.g"), &[1, c]);
    nn::init_zeros(store, &format!("{name}.b"), &[1, c]);
}

fn init_res_block(store: &mut ParamStore, prefix: &str, c: usize, time_dim: usize, rng: &mut ChaCha12Rng) {
    init_chan_norm(store, &format!("{prefix}.norm1"), c);
    init_conv(store, &format!("{prefix}.conv1"), c, c, 3, rng);
    nn::init_linear(store, &format!("{prefix}.temb"), time_dim, c, rng);
    init_chan_norm(store, &format!("{prefix}.norm2"), c);
    init_conv(store, &format!("{prefix}.conv2"), c, c, 3, rng);
}

/// Register the backbone under `unet.*` and its MCL layers under `mcl.*`.
pub fn init_unet(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha12Rng) {
    let [c0, c1, c2] = cfg.unet_channels;
    let td = cfg.time_dim;

    nn::init_linear(store, "unet.time.fc1", td, td, rng);
    nn::init_linear(store, "unet.time.fc2", td, td, rng);

    init_conv(store, "unet.conv_in", cfg.in_channels, c0, 3, rng);

    init_res_block(store, "unet.down0.res", c0, td, rng);
    mcl::init_mcl_layer(store, "mcl.down0", BlockRole::Down, c0, cfg.d_sd, rng);
    init_conv(store, "unet.down0.ds", c0, c1, 3, rng);

    init_res_block(store, "unet.down1.res", c1, td, rng);
    mcl::init_mcl_layer(store, "mcl.down1", BlockRole::Down, c1, cfg.d_sd, rng);
    init_conv(store, "unet.down1.ds", c1, c2, 3, rng);

    init_res_block(store, "unet.mid.res1", c2, td, rng);
    mcl::init_mcl_layer(store, "mcl.mid", BlockRole::Middle, c2, cfg.d_sd, rng);
    init_res_block(store, "unet.mid.res2", c2, td, rng);

    init_conv(store, "unet.up1.us", c2, c1, 3, rng);
    init_conv(store, "unet.up1.merge", c1 * 2, c1, 3, rng);
    init_res_block(store, "unet.up1.res", c1, td, rng);
    mcl::init_mcl_layer(store, "mcl.up1", BlockRole::Up, c1, cfg.d_sd, rng);

    init_conv(store, "unet.up0.us", c1, c0, 3, rng);
    init_conv(store, "unet.up0.merge", c0 * 2, c0, 3, rng);
    init_res_block(store, "unet.up0.res", c0, td, rng);
    mcl::init_mcl_layer(store, "mcl.up0", BlockRole::Up, c0, cfg.d_sd, rng);

    init_chan_norm(store, "unet.out.norm", c0);
    init_conv(store, "unet.out.conv", c0, cfg.in_channels, 3, rng);
    // start from a zero prediction
    *store.get_mut("unet.out.conv.w") =
        ndarray::ArrayD::zeros(store.get("unet.out.conv.w").raw_dim());
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, stride: usize) -> Var {
    let w = g.param(store, &format!("{name}.w"));
    let b = g.param(store, &format!("{name}.b"));
    let y = g.conv2d(x, w, 3, stride, 1);
    g.add_chan_bias(y, b)
}

fn chan_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Var {
    let n = g.norm_channels(x, 1e-5);
    let gain = g.param(store, &format!("{name}.g"));
    let bias = g.param(store, &format!("{name}.b"));
    let h = g.mul_chan(n, gain);
    g.add_chan_bias(h, bias)
}

fn res_block(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var, temb: Var) -> Var {
    let mut h = chan_norm(g, store, &format!("{prefix}.norm1"), x);
    h = g.silu(h);
    h = conv(g, store, &format!("{prefix}.conv1"), h, 1);
    let tproj = nn::linear(g, store, &format!("{prefix}.temb"), temb);
    h = g.add_chan_bias_batched(h, tproj);
    h = chan_norm(g, store, &format!("{prefix}.norm2"), h);
    h = g.silu(h);
    h = conv(g, store, &format!("{prefix}.conv2"), h, 1);
    g.add(x, h)
}

/// Apply one MCL layer to a `[B,C,H,W]` feature map, per sample.
fn apply_mcl(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    role: BlockRole,
    x: Var,
    conds: &[ConditionVars],
    heads: usize,
    probe: &mut Option<&mut MclProbe>,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut parts = Vec::with_capacity(b);
    for bi in 0..b {
        let xi = g.index_axis0(x, bi);
        let flat = g.reshape(xi, &[c, h * w]);
        let tokens = g.transpose(flat);
        let out = mcl::mcl_cross_attention(g, store, name, role, tokens, conds[bi], heads)?;
        if let Some(p) = probe {
            p.outputs.push((name.to_string(), bi, g.value2(out).to_owned()));
        }
        let back = g.transpose(out);
        let rect = g.reshape(back, &[c, h, w]);
        parts.push(rect);
    }
    Ok(g.stack_axis0(&parts))
}

/// Noise prediction for a batch. `ts[i]` and `conds[i]` belong to sample
/// `i`; output shape equals input shape.
pub fn unet_forward(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    z_t: Var,
    ts: &[usize],
    conds: &[ConditionVars],
    options: UnetOptions,
    mut probe: Option<&mut MclProbe>,
) -> Result<Var> {
    let shape = g.shape(z_t).to_vec();
    if shape.len() != 4 || shape[1] != cfg.in_channels {
        return Err(Error::shape(
            format!("[b, {}, s, s]", cfg.in_channels),
            format!("{shape:?}"),
        ));
    }
    let b = shape[0];
    if ts.len() != b || conds.len() != b {
        return Err(Error::InvalidArgument(format!(
            "batch {b} needs {b} timesteps and conditions, got {} and {}",
            ts.len(),
            conds.len()
        )));
    }

    // sinusoidal timestep embedding -> small MLP
    let mut temb_rows = Array2::<f64>::zeros((b, cfg.time_dim));
    for (i, &t) in ts.iter().enumerate() {
        let row = nn::sinusoidal_embedding(t as f64, cfg.time_dim);
        temb_rows.row_mut(i).assign(&row.row(0));
    }
    let temb0 = g.constant2(temb_rows);
    let t1 = nn::linear(g, store, "unet.time.fc1", temb0);
    let t1a = g.silu(t1);
    let temb = nn::linear(g, store, "unet.time.fc2", t1a);

    let heads = cfg.mcl_heads;
    let mut x = conv(g, store, "unet.conv_in", z_t, 1);

    x = res_block(g, store, "unet.down0.res", x, temb);
    x = apply_mcl(g, store, "mcl.down0", BlockRole::Down, x, conds, heads, &mut probe)?;
    let skip0 = x;
    x = conv(g, store, "unet.down0.ds", x, 2);

    x = res_block(g, store, "unet.down1.res", x, temb);
    x = apply_mcl(g, store, "mcl.down1", BlockRole::Down, x, conds, heads, &mut probe)?;
    let skip1 = x;
    x = conv(g, store, "unet.down1.ds", x, 2);

    x = res_block(g, store, "unet.mid.res1", x, temb);
    if !options.ablate_middle_mcl {
        x = apply_mcl(g, store, "mcl.mid", BlockRole::Middle, x, conds, heads, &mut probe)?;
    }
    x = res_block(g, store, "unet.mid.res2", x, temb);

    x = g.upsample_nearest_2x(x);
    x = conv(g, store, "unet.up1.us", x, 1);
    x = g.concat_chan(&[x, skip1]);
    x = conv(g, store, "unet.up1.merge", x, 1);
    x = res_block(g, store, "unet.up1.res", x, temb);
    x = apply_mcl(g, store, "mcl.up1", BlockRole::Up, x, conds, heads, &mut probe)?;

    x = g.upsample_nearest_2x(x);
    x = conv(g, store, "unet.up0.us", x, 1);
    x = g.concat_chan(&[x, skip0]);
    x = conv(g, store, "unet.up0.merge", x, 1);
    x = res_block(g, store, "unet.up0.res", x, temb);
    x = apply_mcl(g, store, "mcl.up0", BlockRole::Up, x, conds, heads, &mut probe)?;

    x = chan_norm(g, store, "unet.out.norm", x);
    x = g.silu(x);
    Ok(conv(g, store, "unet.out.conv", x, 1))
}

/// Graph form of the reconstruction objective for training: draw one
/// noise sample per batch element, noise `z_0` at the given timesteps,
/// and return the element-mean squared error between the drawn noise and
/// the prediction.
pub fn reconstruction_loss_var(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ModelConfig,
    schedule: &NoiseSchedule,
    z0: &Array4<f64>,
    ts: &[usize],
    conds: &[ConditionVars],
    rng: &mut ChaCha12Rng,
) -> Result<Var> {
    let (b, c, h, w) = z0.dim();
    if ts.len() != b {
        return Err(Error::InvalidArgument("one timestep per sample required".into()));
    }
    for &t in ts {
        schedule.check_t(t)?;
    }
    let eps = draw_noise(rng, (b, c, h, w));
    let mut z_t = Array4::<f64>::zeros((b, c, h, w));
    for i in 0..b {
        let ab = schedule.alpha_bar[ts[i]];
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    z_t[[i, ci, y, x]] =
                        ab.sqrt() * z0[[i, ci, y, x]] + (1.0 - ab).sqrt() * eps[[i, ci, y, x]];
                }
            }
        }
    }
    let z_t_var = g.constant(z_t.into_dyn());
    let eps_hat = unet_forward(g, store, cfg, z_t_var, ts, conds, UnetOptions::default(), None)?;
    let eps_var = g.constant(eps.into_dyn());
    let diff = g.sub(eps_var, eps_hat);
    let sq = g.mul(diff, diff);
    Ok(g.mean_all(sq))
}

/// The trained backbone as a [`NoisePredictor`]: every sample in the
/// batch shares the call's timestep and condition pack.
pub struct UnetModel<'a> {
    pub store: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub options: UnetOptions,
}

impl NoisePredictor for UnetModel<'_> {
    fn predict(&self, z_t: &Array4<f64>, t: usize, cond: &ConditionPack) -> Result<Array4<f64>> {
        let b = z_t.dim().0;
        let mut g = Graph::eval();
        let zv = g.constant(z_t.clone().into_dyn());
        let cv = ConditionVars::from_pack(&mut g, cond);
        let conds = vec![cv; b];
        let ts = vec![t; b];
        let out = unet_forward(&mut g, self.store, self.cfg, zv, &ts, &conds, self.options, None)?;
        Ok(g
            .value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("unet output is 4-d"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::randn;
    use rand::SeedableRng;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            in_channels: 2,
            unet_channels: [8, 12, 16],
            d_sd: 8,
            time_dim: 8,
            mcl_heads: 2,
            text_encoder_blocks: 1,
            ..ModelConfig::default()
        }
    }

    fn unet_store(cfg: &ModelConfig, seed: u64, randomize_mcl_out: bool) -> ParamStore {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        init_unet(&mut store, cfg, &mut rng);
        if randomize_mcl_out {
            // the zero-init output projections make MCL layers (and the
            // whole prediction) inert at initialization; give them weight
            // so conditioning is live
            for (name, _) in MCL_LAYERS {
                let d = store.get(&format!("{name}.wq")).shape()[0];
                *store.get_mut(&format!("{name}.wo")) =
                    (randn(&mut rng, d, d) * 0.3).into_dyn();
            }
            let out_shape = store.get("unet.out.conv.w").shape().to_vec();
            *store.get_mut("unet.out.conv.w") =
                (randn(&mut rng, out_shape[0], out_shape[1]) * 0.1).into_dyn();
        }
        store
    }

    fn rand_pack(rng: &mut ChaCha12Rng, k_c: usize, k_s: usize, d: usize) -> ConditionPack {
        ConditionPack {
            content: randn(rng, k_c, d),
            style: randn(rng, k_s, d),
            content_is_null: false,
            style_is_null: false,
        }
    }

    fn forward_value(
        store: &ParamStore,
        cfg: &ModelConfig,
        z: &Array4<f64>,
        t: usize,
        pack: &ConditionPack,
        options: UnetOptions,
    ) -> Array4<f64> {
        UnetModel { store, cfg, options }
            .predict(z, t, pack)
            .unwrap()
    }

    #[test]
    fn output_shape_matches_input_and_is_deterministic() {
        let cfg = small_cfg();
        let store = unet_store(&cfg, 0, true);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let z = draw_noise(&mut rng, (2, 2, 8, 8));
        let pack = rand_pack(&mut rng, 5, 3, cfg.d_sd);
        let a = forward_value(&store, &cfg, &z, 10, &pack, UnetOptions::default());
        assert_eq!(a.dim(), z.dim());
        let b = forward_value(&store, &cfg, &z, 10, &pack, UnetOptions::default());
        assert_eq!(a, b);
    }

    #[test]
    fn style_change_moves_output_only_through_middle() {
        let cfg = small_cfg();
        let store = unet_store(&cfg, 2, true);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z = draw_noise(&mut rng, (1, 2, 8, 8));
        let pack_a = rand_pack(&mut rng, 4, 3, cfg.d_sd);
        let mut pack_b = pack_a.clone();
        pack_b.style = randn(&mut rng, 3, cfg.d_sd);

        let a = forward_value(&store, &cfg, &z, 500, &pack_a, UnetOptions::default());
        let b = forward_value(&store, &cfg, &z, 500, &pack_b, UnetOptions::default());
        assert_ne!(a, b, "style must reach the output through the middle block");

        let ablated = UnetOptions { ablate_middle_mcl: true };
        let a2 = forward_value(&store, &cfg, &z, 500, &pack_a, ablated);
        let b2 = forward_value(&store, &cfg, &z, 500, &pack_b, ablated);
        assert!(
            a2.iter().zip(b2.iter()).all(|(x, y)| x.to_bits() == y.to_bits()),
            "with the middle block ablated the prediction must be style-invariant"
        );
    }

    #[test]
    fn timestep_changes_output() {
        let cfg = small_cfg();
        let store = unet_store(&cfg, 4, true);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let z = draw_noise(&mut rng, (1, 2, 8, 8));
        let pack = rand_pack(&mut rng, 4, 2, cfg.d_sd);
        let a = forward_value(&store, &cfg, &z, 1, &pack, UnetOptions::default());
        let b = forward_value(&store, &cfg, &z, 900, &pack, UnetOptions::default());
        assert_ne!(a, b);
    }

    #[test]
    fn probe_records_every_mcl_layer_per_sample() {
        let cfg = small_cfg();
        let store = unet_store(&cfg, 6, false);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let z = draw_noise(&mut rng, (2, 2, 8, 8));
        let pack = rand_pack(&mut rng, 4, 2, cfg.d_sd);

        let mut g = Graph::new();
        let zv = g.constant(z.into_dyn());
        let cv = ConditionVars::from_pack(&mut g, &pack);
        let mut probe = MclProbe::default();
        unet_forward(
            &mut g,
            &store,
            &cfg,
            zv,
            &[3, 3],
            &[cv, cv],
            UnetOptions::default(),
            Some(&mut probe),
        )
        .unwrap();
        assert_eq!(probe.outputs.len(), MCL_LAYERS.len() * 2);
        let mid_count = probe.outputs.iter().filter(|(n, _, _)| n == "mcl.mid").count();
        assert_eq!(mid_count, 2);
    }

    #[test]
    fn reconstruction_loss_finite_and_seeded() {
        let cfg = small_cfg();
        let store = unet_store(&cfg, 8, true);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z0 = draw_noise(&mut rng, (2, 2, 8, 8));
        let pack = rand_pack(&mut rng, 4, 2, cfg.d_sd);

        let run = |seed: u64| {
            let mut g = Graph::new();
            let cv = ConditionVars::from_pack(&mut g, &pack);
            let mut loss_rng = ChaCha12Rng::seed_from_u64(seed);
            let l = reconstruction_loss_var(
                &mut g,
                &store,
                &cfg,
                &NoiseSchedule::linear(1000, 1e-4, 2e-2).unwrap(),
                &z0,
                &[100, 900],
                &[cv, cv],
                &mut loss_rng,
            )
            .unwrap();
            g.scalar(l)
        };
        let a = run(42);
        let b = run(42);
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a.is_finite() && a > 0.0);
    }
}
