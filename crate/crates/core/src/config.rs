//! Runtime configuration: TOML file, programmatic overrides, and
//! environment variables, applied in that order (environment wins).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub dataset: DatasetConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sample: SampleConfig::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Side length of the square latent / image grid.
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    /// Image-encoder output width; kept equal to `d_q` by default so no
    /// extra projection is needed.
    pub d_enc: usize,
    /// Query / text embedding width in the disentanglement network.
    pub d_q: usize,
    pub n_style_queries: usize,
    pub n_content_queries: usize,
    pub qformer_blocks: usize,
    pub qformer_heads: usize,
    /// Cross-attend to image features in every block; when false, only
    /// every other block (starting with the first).
    pub cross_attention_every_block: bool,
    /// Process both query banks in one joint pass (self-attention across
    /// banks). When false, each bank runs a separate pass.
    pub joint_query_pass: bool,
    pub image_encoder_blocks: usize,
    pub itg_blocks: usize,
    pub text_max_len: usize,
    /// Backbone (diffusion-side) embedding width.
    pub d_sd: usize,
    pub text_encoder_blocks: usize,
    /// Channel widths of the three UNet levels, shallow to deep.
    pub unet_channels: [usize; 3],
    pub time_dim: usize,
    pub mcl_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            in_channels: 4,
            patch_size: 4,
            d_enc: 64,
            d_q: 64,
            n_style_queries: 16,
            n_content_queries: 16,
            qformer_blocks: 4,
            qformer_heads: 4,
            cross_attention_every_block: true,
            joint_query_pass: true,
            image_encoder_blocks: 2,
            itg_blocks: 2,
            text_max_len: 64,
            d_sd: 64,
            text_encoder_blocks: 2,
            unet_channels: [32, 64, 128],
            time_dim: 64,
            mcl_heads: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_stage1: u64,
    pub steps_stage2: u64,
    pub tau: f64,
    pub p_swap_style: f64,
    pub p_swap_content: f64,
    pub p_keyword_drop: f64,
    pub p_cond_drop: f64,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            batch_size: 8,
            steps_stage1: 2000,
            steps_stage2: 2000,
            tau: 0.07,
            p_swap_style: 0.5,
            p_swap_content: 0.5,
            p_keyword_drop: 0.25,
            p_cond_drop: 0.1,
            seed: 0,
            weight_decay: 0.01,
            grad_clip: 1.0,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SampleConfig {
    pub steps: usize,
    pub guidance_scale: f64,
    /// Bound on the mean absolute difference between full-step and
    /// half-step DDIM trajectories in the sampler consistency check.
    pub ddim_consistency_bound: f64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance_scale: 7.5,
            ddim_consistency_bound: 0.35,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct DatasetConfig {
    pub excluded_genres: Vec<String>,
    pub excluded_movements: Vec<String>,
    pub captioner: CaptionerConfig,
    /// Worker threads for caption generation. Assembly order is always
    /// input order regardless of this value.
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            excluded_genres: vec![
                "photography".into(),
                "architecture".into(),
                "design drawings".into(),
                "advertisements".into(),
            ],
            excluded_movements: vec!["abstract".into(), "minimalism".into()],
            captioner: CaptionerConfig::default(),
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct CaptionerConfig {
    pub url: String,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for CaptionerConfig {
    fn default() -> Self {
        Self {
            url: "http://localhost:8752/caption".into(),
            timeout_ms: 30_000,
            retries: 3,
        }
    }
}

/// Environment variables recognized by [`Config::apply_env_overrides`].
/// Listed here so `--help` and the README can stay in sync with the code.
pub const ENV_OVERRIDES: &[(&str, &str)] = &[
    ("STYLEDIFF_CAPTIONER_URL", "dataset.captioner.url"),
    ("STYLEDIFF_CAPTIONER_TIMEOUT_MS", "dataset.captioner.timeout_ms"),
    ("STYLEDIFF_CAPTIONER_RETRIES", "dataset.captioner.retries"),
    ("STYLEDIFF_SEED", "train.seed"),
    ("STYLEDIFF_LEARNING_RATE", "train.learning_rate"),
    ("STYLEDIFF_BATCH_SIZE", "train.batch_size"),
    ("STYLEDIFF_STEPS_STAGE1", "train.steps_stage1"),
    ("STYLEDIFF_STEPS_STAGE2", "train.steps_stage2"),
    ("STYLEDIFF_GUIDANCE_SCALE", "sample.guidance_scale"),
    ("STYLEDIFF_SAMPLE_STEPS", "sample.steps"),
];

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from an optional file, falling back to defaults, then apply
    /// environment overrides. CLI flags are applied by the caller between
    /// the two steps, so the effective precedence is file < CLI < env.
    pub fn resolve(path: Option<&Path>, cli_overrides: impl FnOnce(&mut Config)) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        cli_overrides(&mut cfg);
        cfg.apply_env_overrides(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply the documented `STYLEDIFF_*` overrides; `lookup` abstracts
    /// `std::env::var` for testability.
    pub fn apply_env_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let parse_err = |k: &str, v: &str| Error::Config(format!("bad value for {k}: `{v}`"));
        for (key, _) in ENV_OVERRIDES {
            let Some(raw) = lookup(key) else { continue };
            match *key {
                "STYLEDIFF_CAPTIONER_URL" => self.dataset.captioner.url = raw,
                "STYLEDIFF_CAPTIONER_TIMEOUT_MS" => {
                    self.dataset.captioner.timeout_ms =
                        raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_CAPTIONER_RETRIES" => {
                    self.dataset.captioner.retries = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_SEED" => {
                    self.train.seed = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_LEARNING_RATE" => {
                    self.train.learning_rate = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_BATCH_SIZE" => {
                    self.train.batch_size = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_STEPS_STAGE1" => {
                    self.train.steps_stage1 = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_STEPS_STAGE2" => {
                    self.train.steps_stage2 = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_GUIDANCE_SCALE" => {
                    self.sample.guidance_scale = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                "STYLEDIFF_SAMPLE_STEPS" => {
                    self.sample.steps = raw.parse().map_err(|_| parse_err(key, &raw))?
                }
                _ => unreachable!(),
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.image_size % m.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                m.image_size, m.patch_size
            )));
        }
        if m.d_q % m.qformer_heads != 0 || m.d_sd % m.mcl_heads != 0 {
            return Err(Error::Config("embedding width not divisible by head count".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.train.tau <= 0.0 {
            return Err(Error::Config("tau must be positive".into()));
        }
        for (name, p) in [
            ("p_swap_style", self.train.p_swap_style),
            ("p_swap_content", self.train.p_swap_content),
            ("p_keyword_drop", self.train.p_keyword_drop),
            ("p_cond_drop", self.train.p_cond_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1], got {p}")));
            }
        }
        let s = &self.schedule;
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(Error::Config("betas must satisfy 0 < start <= end < 1".into()));
        }
        if s.train_timesteps == 0 {
            return Err(Error::Config("train_timesteps must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
    }

    #[test]
    fn env_overrides_take_precedence() {
        let mut cfg = Config::default();
        cfg.train.seed = 7; // pretend this came from a CLI flag
        cfg.apply_env_overrides(|k| match k {
            "STYLEDIFF_SEED" => Some("42".to_string()),
            "STYLEDIFF_CAPTIONER_URL" => Some("http://example:1/cap".to_string()),
            _ => None,
        })
        .unwrap();
        assert_eq!(cfg.train.seed, 42);
        assert_eq!(cfg.dataset.captioner.url, "http://example:1/cap");
    }

    #[test]
    fn bad_env_value_is_an_error() {
        let mut cfg = Config::default();
        let err = cfg
            .apply_env_overrides(|k| (k == "STYLEDIFF_SEED").then(|| "not-a-number".to_string()))
            .unwrap_err();
        assert!(err.to_string().contains("STYLEDIFF_SEED"));
    }

    #[test]
    fn file_round_trip() {
        let cfg = Config::default();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_probability_rejected() {
        let mut cfg = Config::default();
        cfg.train.p_cond_drop = 1.5;
        assert!(cfg.validate().is_err());
    }
}
