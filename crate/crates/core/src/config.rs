//! Run configuration.
//!
//! A config is a flat TOML document. `alpha` and `beta` are required because
//! their best values differ per dataset; every other key falls back to the
//! training protocol defaults. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Toy,
    PretrainedAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Pta,
    Maxpool,
    Meanpool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gda,
    AddMlp,
    CatMlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClVariant {
    None,
    GlobalOrig,
    LocalOrig,
    Miauc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSharing {
    PerAu,
    Shared,
}

/// Which AU feature enters the contrastive loss and zero-shot MER.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveFeature {
    PreGsd,
    PostGsd,
}

macro_rules! enum_from_str {
    ($($ty:ty),*) => {$(
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                let quoted = format!("\"{s}\"");
                serde_json::from_str(&quoted)
                    .map_err(|_| Error::Config(format!("invalid value `{s}` for {}", stringify!($ty))))
            }
        }
    )*};
}
enum_from_str!(EncoderKind, Pooling, Fusion, ClVariant, ScorerSharing, ContrastiveFeature);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::lr_encoders")]
    pub lr_encoders: f64,
    #[serde(default = "defaults::lr_heads")]
    pub lr_heads: f64,
    #[serde(default = "defaults::lr_decay_epoch")]
    pub lr_decay_epoch: usize,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    #[serde(default = "defaults::magnification")]
    pub magnification: f64,
    #[serde(default = "defaults::input_size")]
    pub input_size: usize,
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default = "defaults::encoder_kind")]
    pub encoder_kind: EncoderKind,
    #[serde(default = "defaults::pooling")]
    pub pooling: Pooling,
    #[serde(default = "defaults::fusion")]
    pub fusion: Fusion,
    #[serde(default = "defaults::cl_variant")]
    pub cl_variant: ClVariant,
    #[serde(default = "defaults::finetune_last_k_layers")]
    pub finetune_last_k_layers: usize,

    /// Dataset name (`casme2`, `samm`) or path to a task file.
    #[serde(default = "defaults::task")]
    pub task: String,
    #[serde(default = "defaults::scorer_sharing")]
    pub scorer_sharing: ScorerSharing,
    #[serde(default = "defaults::contrastive_feature")]
    pub contrastive_feature: ContrastiveFeature,
    #[serde(default)]
    pub gd_normalize_labels: bool,
    #[serde(default = "defaults::logit_scale")]
    pub logit_scale: f64,
    #[serde(default = "defaults::yes")]
    pub learn_logit_scale: bool,
    #[serde(default)]
    pub drop_unlabeled: bool,

    #[serde(default = "defaults::toy_patch")]
    pub toy_patch: usize,
    #[serde(default = "defaults::toy_width")]
    pub toy_width: usize,
    #[serde(default = "defaults::toy_depth")]
    pub toy_visual_depth: usize,
    #[serde(default = "defaults::toy_depth")]
    pub toy_text_depth: usize,
    #[serde(default)]
    pub pretrained_weights: Option<String>,
    #[serde(default)]
    pub emotion_spec: Option<String>,
    #[serde(default = "defaults::run_name")]
    pub run_name: String,
}

mod defaults {
    use super::*;

    pub fn batch_size() -> usize { 8 }
    pub fn epochs() -> usize { 80 }
    pub fn lr_encoders() -> f64 { 0.001 }
    pub fn lr_heads() -> f64 { 0.01 }
    pub fn lr_decay_epoch() -> usize { 40 }
    pub fn momentum() -> f64 { 0.9 }
    pub fn magnification() -> f64 { 3.0 }
    pub fn input_size() -> usize { 224 }
    pub fn seed() -> u64 { 1 }
    pub fn encoder_kind() -> EncoderKind { EncoderKind::Toy }
    pub fn pooling() -> Pooling { Pooling::Pta }
    pub fn fusion() -> Fusion { Fusion::Gda }
    pub fn cl_variant() -> ClVariant { ClVariant::Miauc }
    pub fn finetune_last_k_layers() -> usize { 3 }
    pub fn task() -> String { "casme2".into() }
    pub fn scorer_sharing() -> ScorerSharing { ScorerSharing::PerAu }
    pub fn contrastive_feature() -> ContrastiveFeature { ContrastiveFeature::PostGsd }
    pub fn logit_scale() -> f64 { 1.0 / 0.07 }
    pub fn yes() -> bool { true }
    pub fn toy_patch() -> usize { 32 }
    pub fn toy_width() -> usize { 32 }
    pub fn toy_depth() -> usize { 1 }
    pub fn run_name() -> String { "run".into() }
}

impl Config {
    /// Protocol defaults with the given trade-off coefficients.
    pub fn with_coefficients(alpha: f64, beta: f64) -> Config {
        let text = format!("alpha = {alpha:?}\nbeta = {beta:?}\n");
        Config::from_toml_str(&text).expect("default config is valid")
    }

    /// Recommended coefficients per dataset: (alpha, beta).
    pub fn dataset_coefficients(dataset: crate::task::Dataset) -> (f64, f64) {
        match dataset {
            crate::task::Dataset::Casme2 => (0.6, 1.0),
            crate::task::Dataset::Samm => (1.0, 0.6),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Config> {
        let config: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Config::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return fail(format!("alpha must be a finite value >= 0, got {}", self.alpha));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return fail(format!("beta must be a finite value >= 0, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if !(self.lr_encoders >= 0.0) || !(self.lr_heads >= 0.0) {
            return fail("learning rates must be >= 0".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return fail(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.magnification > 0.0) {
            return fail(format!("magnification must be positive, got {}", self.magnification));
        }
        if !(self.logit_scale > 0.0) {
            return fail(format!("logit_scale must be positive, got {}", self.logit_scale));
        }
        if self.encoder_kind == EncoderKind::Toy {
            if self.toy_patch == 0 || self.input_size % self.toy_patch != 0 {
                return fail(format!(
                    "input_size {} is not a multiple of toy_patch {}",
                    self.input_size, self.toy_patch
                ));
            }
            if self.toy_width < 2 || self.toy_width % 2 != 0 {
                return fail(format!("toy_width must be even and >= 2, got {}", self.toy_width));
            }
        }
        if self.encoder_kind == EncoderKind::PretrainedAdapter && self.pretrained_weights.is_none() {
            return fail("encoder_kind = \"pretrained-adapter\" requires pretrained_weights".into());
        }
        Ok(())
    }

    /// Applies a `key=value` override using the same parser as the file.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let mut table: toml::Table = toml::from_str(&self.to_toml()).expect("round trip");
        let parsed: toml::Value = match toml::from_str::<toml::Table>(&format!("v = {value}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(value.to_string()),
        };
        if !table.contains_key(key) && !OPTIONAL_KEYS.contains(&key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        let parsed = match (table.get(key), parsed) {
            (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
            (_, v) => v,
        };
        table.insert(key.to_string(), parsed);
        *self = Config::from_toml_str(&toml::to_string(&table).expect("table serializes"))?;
        Ok(())
    }

    pub(crate) fn resolve_path(&self, value: &str, base: Option<&Path>) -> PathBuf {
        let p = Path::new(value);
        match base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.to_path_buf(),
        }
    }
}

const OPTIONAL_KEYS: &[&str] = &["pretrained_weights", "emotion_spec"];
