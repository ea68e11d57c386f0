//! Training configuration and its `key=value` text form.
//!
//! One key per line, `#` starts a comment. Training keys are bare
//! (`batch_size = 32`); encoder and example-building keys carry an
//! `encoder.` or `policy.` prefix.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::Setting;
use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::preprocess::{BuildPolicy, MarkingMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_zero_shot: f64,
    pub lr_one_shot: f64,
    /// Selects which of the two learning rates applies.
    pub setting: Setting,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub rdrop_alpha: f64,
    pub fgm_epsilon: f64,
    pub contrastive_weight: f64,
    pub contrastive_temperature: f64,
    pub aeda_enabled: bool,
    /// Minimum training-set frequency for a word to enter the vocabulary.
    pub min_freq: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_zero_shot: 1e-5,
            lr_one_shot: 3e-5,
            setting: Setting::ZeroShot,
            batch_size: 32,
            epochs: 20,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            rdrop_alpha: 0.0,
            fgm_epsilon: 0.0,
            contrastive_weight: 0.0,
            contrastive_temperature: 0.05,
            aeda_enabled: false,
            min_freq: 1,
            seed: 0,
        }
    }
}

fn invalid(key: &str, message: impl Into<String>) -> Error {
    Error::InvalidConfig {
        key: key.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    pub fn base_lr(&self) -> f64 {
        match self.setting {
            Setting::ZeroShot => self.lr_zero_shot,
            Setting::OneShot => self.lr_one_shot,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(invalid("warmup_fraction", "must lie in (0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be >= 1"));
        }
        if self.epochs == 0 {
            return Err(invalid("epochs", "must be >= 1"));
        }
        for (key, v) in [
            ("lr_zero_shot", self.lr_zero_shot),
            ("lr_one_shot", self.lr_one_shot),
            ("weight_decay", self.weight_decay),
            ("rdrop_alpha", self.rdrop_alpha),
            ("fgm_epsilon", self.fgm_epsilon),
            ("contrastive_weight", self.contrastive_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(key, format!("must be a finite value >= 0, got {v}")));
            }
        }
        if !(self.contrastive_temperature > 0.0) {
            return Err(invalid("contrastive_temperature", "must be > 0"));
        }
        if self.min_freq == 0 {
            return Err(invalid("min_freq", "must be >= 1"));
        }
        Ok(())
    }
}

/// Everything `train` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// `vocab_size` is filled in from the vocabulary when left at 0.
    pub encoder: EncoderConfig,
    pub policy: BuildPolicy,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            encoder: EncoderConfig::default(),
            policy: BuildPolicy::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V>
where
    V::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: V::Err| invalid(key, format!("cannot parse `{value}`: {e}")))
}

fn marking_mode(key: &str, value: &str) -> Result<MarkingMode> {
    match value {
        "always" => Ok(MarkingMode::Always),
        "undeformed_only" => Ok(MarkingMode::UndeformedOnly),
        _ => Err(invalid(key, format!("expected always or undeformed_only, got `{value}`"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let e = &mut self.encoder;
        let p = &mut self.policy;
        match key {
            "lr_zero_shot" => t.lr_zero_shot = parse(key, value)?,
            "lr_one_shot" => t.lr_one_shot = parse(key, value)?,
            "setting" => t.setting = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "warmup_fraction" => t.warmup_fraction = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "rdrop_alpha" => t.rdrop_alpha = parse(key, value)?,
            "fgm_epsilon" => t.fgm_epsilon = parse(key, value)?,
            "contrastive_weight" => t.contrastive_weight = parse(key, value)?,
            "contrastive_temperature" => t.contrastive_temperature = parse(key, value)?,
            "aeda_enabled" => t.aeda_enabled = parse(key, value)?,
            "min_freq" => t.min_freq = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "encoder.vocab_size" => e.vocab_size = parse(key, value)?,
            "encoder.dim" => e.dim = parse(key, value)?,
            "encoder.layers" => e.layers = parse(key, value)?,
            "encoder.heads" => e.heads = parse(key, value)?,
            "encoder.ffn_dim" => e.ffn_dim = parse(key, value)?,
            "encoder.dropout_rate" => e.dropout_rate = parse(key, value)?,
            "encoder.max_position" => e.max_position = parse(key, value)?,
            "encoder.pooling" => e.pooling = parse::<Pooling>(key, value)?,
            "encoder.num_classes" => e.num_classes = parse(key, value)?,
            "policy.include_context" => p.include_context = parse(key, value)?,
            "policy.mark_idiom" => p.mark_idiom = parse(key, value)?,
            "policy.marking_mode" => p.marking_mode = marking_mode(key, value)?,
            "policy.max_tokens" => p.max_tokens = parse(key, value)?,
            "policy.sep" => p.sep = value.to_string(),
            _ => return Err(invalid(key, "unknown key")),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Schema {
                line: i + 1,
                message: format!("expected key=value, got `{line}`"),
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let t = &self.train;
        let e = &self.encoder;
        let p = &self.policy;
        let mode = match p.marking_mode {
            MarkingMode::Always => "always",
            MarkingMode::UndeformedOnly => "undeformed_only",
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("lr_zero_shot", format!("{:?}", t.lr_zero_shot));
        kv("lr_one_shot", format!("{:?}", t.lr_one_shot));
        kv("setting", t.setting.as_str().into());
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_fraction", format!("{:?}", t.warmup_fraction));
        kv("weight_decay", format!("{:?}", t.weight_decay));
        kv("rdrop_alpha", format!("{:?}", t.rdrop_alpha));
        kv("fgm_epsilon", format!("{:?}", t.fgm_epsilon));
        kv("contrastive_weight", format!("{:?}", t.contrastive_weight));
        kv("contrastive_temperature", format!("{:?}", t.contrastive_temperature));
        kv("aeda_enabled", t.aeda_enabled.to_string());
        kv("min_freq", t.min_freq.to_string());
        kv("seed", t.seed.to_string());
        kv("encoder.vocab_size", e.vocab_size.to_string());
        kv("encoder.dim", e.dim.to_string());
        kv("encoder.layers", e.layers.to_string());
        kv("encoder.heads", e.heads.to_string());
        kv("encoder.ffn_dim", e.ffn_dim.to_string());
        kv("encoder.dropout_rate", format!("{:?}", e.dropout_rate));
        kv("encoder.max_position", e.max_position.to_string());
        kv("encoder.pooling", e.pooling.as_str().into());
        kv("encoder.num_classes", e.num_classes.to_string());
        kv("policy.include_context", p.include_context.to_string());
        kv("policy.mark_idiom", p.mark_idiom.to_string());
        kv("policy.marking_mode", mode.into());
        kv("policy.max_tokens", p.max_tokens.to_string());
        kv("policy.sep", p.sep.clone());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.policy.validate()?;
        if self.policy.max_tokens > self.encoder.max_position {
            return Err(invalid(
                "policy.max_tokens",
                format!(
                    "{} exceeds encoder.max_position {}",
                    self.policy.max_tokens, self.encoder.max_position
                ),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&crate::io::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_text().as_bytes())
    }
}
