//! Run configuration: one flat TOML table covering model, training and I/O.
//!
//! Precedence, lowest first: built-in defaults, the `--config` file, each
//! `--set key=value`, then the dedicated flags (`--seed`, `--out`,
//! `--dataset`, `--limit-train`, `--limit-test`).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use vitrecon::model::ModelConfig;
use vitrecon::trainer::{Switches, Task, TrainConfig};

pub const DEFAULT_COMBINATIONS: [&str; 5] = ["vanilla", "spt", "rope", "lsa", "all+disc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding `train/` and `test/`.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    pub seed: u64,
    pub task: Task,

    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub use_spt: bool,
    pub use_rope: bool,
    pub use_lsa: bool,
    pub use_discriminator: bool,
    pub disc_patch: usize,
    pub disc_stride: usize,

    pub noise_variance: f64,
    pub mask_rows: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub lambda_adv: f64,
    pub disc_lr: Option<f64>,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub augment: bool,
    pub log_wall_time: bool,

    /// Switch combinations for `ablate`.
    pub combinations: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        Self {
            dataset: None,
            out: PathBuf::from("runs/latest"),
            limit_train: None,
            limit_test: None,
            seed: 0,
            task: t.task,
            image_h: m.image_h,
            image_w: m.image_w,
            channels: m.channels,
            patch: m.patch,
            d_model: m.d_model,
            heads: m.heads,
            depth: m.depth,
            mlp_ratio: m.mlp_ratio,
            use_spt: m.use_spt,
            use_rope: m.use_rope,
            use_lsa: m.use_lsa,
            use_discriminator: m.use_discriminator,
            disc_patch: m.disc_patch,
            disc_stride: m.disc_stride,
            noise_variance: t.noise_variance,
            mask_rows: t.mask_rows,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
            lambda_adv: t.lambda_adv,
            disc_lr: t.disc_lr,
            grad_clip: t.grad_clip,
            eval_every: t.eval_every,
            augment: t.augment,
            log_wall_time: t.log_wall_time,
            combinations: DEFAULT_COMBINATIONS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Flag values that override everything else.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub limit_train: Option<usize>,
    pub limit_test: Option<usize>,
    /// Raw `key=value` pairs; values use TOML syntax, bare words are strings.
    pub set: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for kv in &overrides.set {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects key=value, got {kv:?}");
            };
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(o) = &overrides.out {
            cfg.out = o.clone();
        }
        if let Some(d) = &overrides.dataset {
            cfg.dataset = Some(d.clone());
        }
        if overrides.limit_train.is_some() {
            cfg.limit_train = overrides.limit_train;
        }
        if overrides.limit_test.is_some() {
            cfg.limit_test = overrides.limit_test;
        }
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            image_h: self.image_h,
            image_w: self.image_w,
            channels: self.channels,
            patch: self.patch,
            d_model: self.d_model,
            heads: self.heads,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
            use_spt: self.use_spt,
            use_rope: self.use_rope,
            use_lsa: self.use_lsa,
            use_discriminator: self.use_discriminator,
            disc_patch: self.disc_patch,
            disc_stride: self.disc_stride,
            seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            task: self.task,
            noise_variance: self.noise_variance,
            mask_rows: self.mask_rows,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            lambda_adv: self.lambda_adv,
            disc_lr: self.disc_lr,
            grad_clip: self.grad_clip,
            seed: self.seed,
            eval_every: self.eval_every,
            checkpoint_dir: Some(self.out.join("checkpoints")),
            augment: self.augment,
            log_wall_time: self.log_wall_time,
        }
    }

    pub fn switch_list(&self) -> Result<Vec<Switches>> {
        if self.combinations.is_empty() {
            bail!("combinations must name at least one switch combination");
        }
        self.combinations.iter().map(|c| Ok(c.parse::<Switches>()?)).collect()
    }

    /// Full validation, run before any file is written.
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 {
            bail!("channels must be 1: datasets are loaded as grayscale");
        }
        if self.epochs == 0 {
            bail!("epochs must be at least 1");
        }
        self.model_config().validate()?;
        let train = self.train_config();
        train.validate()?;
        train.corruption(self.image_h).validate(self.image_h)?;
        if self.use_discriminator && !(self.lambda_adv > 0.0) {
            bail!("use_discriminator needs lambda_adv > 0");
        }
        if self.image_h < 11 || self.image_w < 11 {
            bail!("images must be at least 11x11 for the SSIM window");
        }
        self.switch_list()?;
        Ok(())
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .context("no dataset configured (set `dataset` in the config or pass --dataset)")
    }
}
