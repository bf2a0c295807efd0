//! Flat `key = value` run configuration with dotted namespaces.
//!
//! Resolution order is preset defaults, then the config file, then command
//! line overrides. Unknown keys are errors.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::constellation::RenderConfig;
use crate::dataset::DatasetConfig;
use crate::error::{config_err, Result};
use crate::model::{ModelConfig, Phase};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    /// SNR of the held-out denoising pairs.
    pub denoise_snr_db: f64,
    pub denoise_pairs: usize,
    /// Mask ratio for latent export; 0 encodes every patch.
    pub latent_mask_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Settings {
    pub preset: String,
    pub seed: u64,
    pub data: DatasetConfig,
    pub render: RenderConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub eval: EvalSettings,
}

trait ConfigValue: Sized {
    const EXPECTED: &'static str;
    fn parse_value(s: &str) -> Option<Self>;
    fn format_value(&self) -> String;
}

impl ConfigValue for usize {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for u64 {
    const EXPECTED: &'static str = "a non-negative integer";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok()
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for f64 {
    const EXPECTED: &'static str = "a number";
    fn parse_value(s: &str) -> Option<Self> {
        s.parse().ok().filter(|v: &f64| !v.is_nan())
    }
    fn format_value(&self) -> String {
        format!("{self:?}")
    }
}

impl ConfigValue for bool {
    const EXPECTED: &'static str = "true or false";
    fn parse_value(s: &str) -> Option<Self> {
        match s {
            "true" => Some(true),
            "false" => Some(false),
            _ => None,
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

impl ConfigValue for [f64; 3] {
    const EXPECTED: &'static str = "three comma-separated numbers";
    fn parse_value(s: &str) -> Option<Self> {
        let v: Vec<f64> = s.split(',').map(|p| p.trim().parse().ok()).collect::<Option<_>>()?;
        v.try_into().ok()
    }
    fn format_value(&self) -> String {
        self.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
    }
}

fn parse<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse_value(value.trim()).ok_or_else(|| config_err(format!("{key}: expected {}, got {value:?}", T::EXPECTED)))
}

macro_rules! keys {
    ($($key:literal => $($field:ident).+ : $ty:ty),* $(,)?) => {
        /// Every recognised key, in snapshot order.
        pub const KEYS: &[&str] = &[$($key),*];

        impl Settings {
            /// Set one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => self.$($field).+ = parse::<$ty>(key, value)?,)*
                    _ => return Err(config_err(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// All keys with their current values.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$(($key, ConfigValue::format_value(&self.$($field).+))),*]
            }
        }
    };
}

keys! {
    "seed" => seed: u64,
    "data.pretrain_count" => data.pretrain_count: usize,
    "data.train_count" => data.train_count: usize,
    "data.test_count" => data.test_count: usize,
    "data.snr_min" => data.snr_min: f64,
    "data.snr_max" => data.snr_max: f64,
    "data.signal_images" => data.signal_images: bool,
    "render.plane_extent" => render.plane_extent: f64,
    "render.alphas" => render.alphas: [f64; 3],
    "render.neighborhood_radius" => render.neighborhood_radius: f64,
    "model.img_size" => model.img_size: usize,
    "model.patch_size" => model.patch_size: usize,
    "model.in_channels" => model.in_channels: usize,
    "model.enc_dim" => model.enc_dim: usize,
    "model.enc_depth" => model.enc_depth: usize,
    "model.enc_heads" => model.enc_heads: usize,
    "model.dec_dim" => model.dec_dim: usize,
    "model.dec_depth" => model.dec_depth: usize,
    "model.dec_heads" => model.dec_heads: usize,
    "model.mask_ratio" => model.mask_ratio: f64,
    "model.cls_head_hidden" => model.cls_head_hidden: usize,
    "model.n_downstream_classes" => model.n_downstream_classes: usize,
    "model.mlp_ratio" => model.mlp_ratio: usize,
    "model.ln_eps" => model.ln_eps: f64,
    "pretrain.batch_size" => pretrain.batch_size: usize,
    "pretrain.epochs" => pretrain.epochs: usize,
    "pretrain.lr" => pretrain.lr: f64,
    "pretrain.weight_decay" => pretrain.weight_decay: f64,
    "pretrain.lambda_rec" => pretrain.loss_weights.lambda_rec: f64,
    "pretrain.lambda_cls" => pretrain.loss_weights.lambda_cls: f64,
    "pretrain.ckpt_every" => pretrain.ckpt_every: usize,
    "pretrain.cosine" => pretrain.cosine: bool,
    "finetune.batch_size" => finetune.batch_size: usize,
    "finetune.epochs" => finetune.epochs: usize,
    "finetune.lr" => finetune.lr: f64,
    "finetune.weight_decay" => finetune.weight_decay: f64,
    "finetune.ckpt_every" => finetune.ckpt_every: usize,
    "finetune.cosine" => finetune.cosine: bool,
    "eval.denoise_snr_db" => eval.denoise_snr_db: f64,
    "eval.denoise_pairs" => eval.denoise_pairs: usize,
    "eval.latent_mask_ratio" => eval.latent_mask_ratio: f64,
}

impl Settings {
    /// Small model and dataset for CPU runs.
    pub fn desk() -> Self {
        let model = ModelConfig::desk();
        Settings {
            preset: "desk".into(),
            seed: 0,
            data: DatasetConfig::desk(),
            render: RenderConfig {
                image_size: model.img_size,
                ..RenderConfig::default()
            },
            model,
            pretrain: TrainConfig::pretrain_desk(),
            finetune: TrainConfig::finetune_desk(),
            eval: EvalSettings {
                denoise_snr_db: -5.0,
                denoise_pairs: 100,
                latent_mask_ratio: 0.0,
            },
        }
    }

    /// Full-size hyperparameters.
    pub fn paper() -> Self {
        let model = ModelConfig::paper();
        Settings {
            preset: "paper".into(),
            data: DatasetConfig::paper(),
            render: RenderConfig {
                image_size: model.img_size,
                ..RenderConfig::default()
            },
            model,
            pretrain: TrainConfig::pretrain_paper(),
            finetune: TrainConfig::finetune_paper(),
            ..Settings::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Settings::desk()),
            "paper" => Ok(Settings::paper()),
            other => Err(config_err(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }

    /// Apply `key = value` lines. Blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            self.apply_override(line)
                .map_err(|e| config_err(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    /// Apply one `key=value` assignment.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| config_err(format!("expected key=value, got {assignment:?}")))?;
        self.set(k.trim(), v.trim())
    }

    /// Propagate shared values and check every section.
    pub fn finalize(mut self) -> Result<Self> {
        self.render.image_size = self.model.img_size;
        self.data.master_seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.render.validate()?;
        self.data.validate()?;
        self.pretrain.validate(Phase::Pretrain)?;
        self.finetune.validate(Phase::Finetune)?;
        if !(self.eval.latent_mask_ratio >= 0.0 && self.eval.latent_mask_ratio < 1.0) {
            return Err(config_err("eval.latent_mask_ratio must lie in [0, 1)"));
        }
        Ok(())
    }

    /// Resolved configuration as reloadable text.
    pub fn snapshot(&self) -> String {
        let mut s = format!("# preset: {}\n", self.preset);
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

/// Preset defaults, then `path`, then `overrides`.
pub fn load_config(preset: &str, path: Option<&Path>, overrides: &[String]) -> Result<Settings> {
    let mut s = Settings::preset(preset)?;
    if let Some(p) = path {
        let text = std::fs::read_to_string(p).map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
        s.apply_text(&text, &p.display().to_string())?;
    }
    for o in overrides {
        s.apply_override(o)?;
    }
    s.finalize()
}

/// Full key for `name`: itself if known, else the unique key ending in `.name`.
pub fn resolve_key(name: &str) -> Result<&'static str> {
    if let Some(k) = KEYS.iter().find(|k| **k == name) {
        return Ok(k);
    }
    let suffix = format!(".{name}");
    let hits: Vec<&'static str> = KEYS.iter().copied().filter(|k| k.ends_with(&suffix)).collect();
    match hits.as_slice() {
        [one] => Ok(one),
        [] => Err(config_err(format!("unknown config key {name:?}"))),
        many => Err(config_err(format!("ambiguous key {name:?}: {}", many.join(", ")))),
    }
}
