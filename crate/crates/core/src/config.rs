//! Flat `dotted.key = value` experiment configuration.
//!
//! ```text
//! # comments and blank lines are ignored
//! seed = 7
//! model.preset = tiny
//! adapt.mode = se_bn
//! ```
//!
//! Every key except `seed` has a default. Unknown or repeated keys are errors.
//! The `SEBN_SEED` environment variable overrides `seed`.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::adapters::{AdaptMode, AdaptPolicy, GroupMask};
use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const SEED_ENV: &str = "SEBN_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PretrainLoss {
    Aam,
    Ge2e,
}

impl FromStr for PretrainLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "aam" => Ok(Self::Aam),
            "ge2e" => Ok(Self::Ge2e),
            _ => Err(Error::Config(format!("unknown loss {s:?} (expected aam or ge2e)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Pretraining objective. Adaptation always uses GE2E.
    pub name: PretrainLoss,
    pub margin: f64,
    pub scale: f64,
    /// Fraction of pretraining epochs over which the margin ramps up from 0.
    pub margin_ramp: f64,
    pub ge2e_w_init: f64,
    pub ge2e_b_init: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of steps with linearly increasing learning rate.
    pub warmup: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Random crop length for training batches.
    pub crop_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub groups: GroupMask,
    pub bn_stats_refresh: bool,
    /// Learning rate for `fine_tune`.
    pub lr: f64,
    /// Learning rate for the adapter modes (`se`, `bn`, `se_bn`).
    pub adapter_lr: f64,
    pub epochs: usize,
    /// GE2E batch shape `P × M`.
    pub speakers_per_batch: usize,
    pub utts_per_speaker: usize,
}

impl AdaptConfig {
    pub fn policy(&self) -> Result<AdaptPolicy> {
        AdaptPolicy::new(self.mode, self.groups, self.bn_stats_refresh)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Speakers in the low-resource dev/test split of each target domain.
    pub split_speakers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Defaults for every key, with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            model: ModelConfig::tiny(),
            loss: LossConfig {
                name: PretrainLoss::Aam,
                margin: 0.2,
                scale: 32.0,
                margin_ramp: 0.3,
                ge2e_w_init: 10.0,
                ge2e_b_init: -5.0,
            },
            train: TrainConfig {
                lr: 1e-3,
                epochs: 20,
                batch_size: 32,
                warmup: 0.05,
                beta1: 0.9,
                beta2: 0.999,
                crop_frames: 32,
            },
            adapt: AdaptConfig {
                mode: AdaptMode::SeBn,
                groups: GroupMask::ALL,
                bn_stats_refresh: true,
                lr: 1e-4,
                adapter_lr: 1e-2,
                epochs: 10,
                speakers_per_batch: 8,
                utts_per_speaker: 4,
            },
            data: DataConfig { split_speakers: 50 },
        }
    }

    /// Parses config text. `env_seed` (normally `SEBN_SEED`) takes precedence over the file.
    pub fn parse(text: &str, env_seed: Option<&str>) -> Result<Self> {
        let kv = parse_pairs(text)?;
        let seed_text = env_seed
            .map(str::to_string)
            .or_else(|| kv.get("seed").cloned())
            .ok_or_else(|| Error::Config(format!("seed is required (set it in the config or via {SEED_ENV})")))?;
        let mut cfg = Self::with_seed(parse_value("seed", &seed_text)?);
        if let Some(p) = kv.get("model.preset") {
            cfg.model = match p.as_str() {
                "tiny" => ModelConfig::tiny(),
                "full" => ModelConfig::full(),
                _ => return Err(Error::Config(format!("unknown model.preset {p:?}"))),
            };
        }
        for (k, v) in &kv {
            if k != "seed" && k != "model.preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, honoring `SEBN_SEED`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let env = std::env::var(SEED_ENV).ok();
        Self::parse(&text, env.as_deref())
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if key.starts_with("model.") {
            return set_model_key(&mut self.model, key, v);
        }
        match key {
            "loss.name" => self.loss.name = v.parse()?,
            "loss.margin" => self.loss.margin = parse_value(key, v)?,
            "loss.scale" => self.loss.scale = parse_value(key, v)?,
            "loss.margin_ramp" => self.loss.margin_ramp = parse_value(key, v)?,
            "loss.ge2e_w_init" => self.loss.ge2e_w_init = parse_value(key, v)?,
            "loss.ge2e_b_init" => self.loss.ge2e_b_init = parse_value(key, v)?,
            "train.lr" => self.train.lr = parse_value(key, v)?,
            "train.epochs" => self.train.epochs = parse_value(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, v)?,
            "train.warmup" => self.train.warmup = parse_value(key, v)?,
            "train.beta1" => self.train.beta1 = parse_value(key, v)?,
            "train.beta2" => self.train.beta2 = parse_value(key, v)?,
            "train.crop_frames" => self.train.crop_frames = parse_value(key, v)?,
            "adapt.mode" => self.adapt.mode = v.parse()?,
            "adapt.groups" => self.adapt.groups = v.parse()?,
            "adapt.bn_stats_refresh" => self.adapt.bn_stats_refresh = parse_value(key, v)?,
            "adapt.lr" => self.adapt.lr = parse_value(key, v)?,
            "adapt.adapter_lr" => self.adapt.adapter_lr = parse_value(key, v)?,
            "adapt.epochs" => self.adapt.epochs = parse_value(key, v)?,
            "adapt.speakers_per_batch" => self.adapt.speakers_per_batch = parse_value(key, v)?,
            "adapt.utts_per_speaker" => self.adapt.utts_per_speaker = parse_value(key, v)?,
            "data.split_speakers" => self.data.split_speakers = parse_value(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=0.5).contains(&self.loss.margin) || !(self.loss.scale > 0.0) {
            return bad("loss.margin must lie in [0, 0.5] and loss.scale be positive");
        }
        if !(0.0..=1.0).contains(&self.loss.margin_ramp) || !(0.0..=1.0).contains(&self.train.warmup) {
            return bad("loss.margin_ramp and train.warmup must lie in [0, 1]");
        }
        if !(self.loss.ge2e_w_init > 0.0) {
            return bad("loss.ge2e_w_init must be positive");
        }
        if !(self.train.lr > 0.0) || !(self.adapt.lr > 0.0) || !(self.adapt.adapter_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.train.batch_size < 2 || self.train.crop_frames < crate::model::net::MIN_FRAMES {
            return bad("train.batch_size must be ≥ 2 and train.crop_frames ≥ 16");
        }
        if self.adapt.speakers_per_batch < 2 || self.adapt.utts_per_speaker < 2 {
            return bad("GE2E batches need at least 2 speakers × 2 utterances");
        }
        if self.data.split_speakers < 2 {
            return bad("data.split_speakers must be at least 2");
        }
        self.adapt.policy().map(|_| ())
    }
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_list(key: &str, v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_value(key, p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key} needs exactly 4 comma-separated values")))
}

fn set_model_key(m: &mut ModelConfig, key: &str, v: &str) -> Result<()> {
    match key {
        "model.channels" => m.channels = parse_list(key, v)?,
        "model.blocks" => m.blocks_per_group = parse_list(key, v)?,
        "model.reduction" => m.reduction = parse_value(key, v)?,
        "model.mel_bins" => m.mel_bins = parse_value(key, v)?,
        "model.embedding_dim" => m.embedding_dim = parse_value(key, v)?,
        "model.num_classes" => m.num_classes = parse_value(key, v)?,
        "model.use_se" => m.use_se = parse_value(key, v)?,
        "model.asp_hidden" => m.asp_hidden = parse_value(key, v)?,
        "model.bn_eps" => m.bn_eps = parse_value(key, v)?,
        "model.bn_momentum" => m.bn_momentum = parse_value(key, v)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

/// `key = value` pairs in file order.
pub fn parse_pairs(text: &str) -> Result<IndexMap<String, String>> {
    let mut kv = IndexMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", n + 1)));
        }
        if kv.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: repeated key {k}", n + 1)));
        }
    }
    Ok(kv)
}

impl ModelConfig {
    /// Canonical `model.*` lines; the inverse of [`ModelConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |a: &[usize; 4]| a.map(|v| v.to_string()).join(",");
        let mut s = String::new();
        let _ = writeln!(s, "model.channels = {}", list(&self.channels));
        let _ = writeln!(s, "model.blocks = {}", list(&self.blocks_per_group));
        let _ = writeln!(s, "model.reduction = {}", self.reduction);
        let _ = writeln!(s, "model.mel_bins = {}", self.mel_bins);
        let _ = writeln!(s, "model.embedding_dim = {}", self.embedding_dim);
        let _ = writeln!(s, "model.num_classes = {}", self.num_classes);
        let _ = writeln!(s, "model.use_se = {}", self.use_se);
        let _ = writeln!(s, "model.asp_hidden = {}", self.asp_hidden);
        let _ = writeln!(s, "model.bn_eps = {:e}", self.bn_eps);
        let _ = writeln!(s, "model.bn_momentum = {:e}", self.bn_momentum);
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_pairs(text)?;
        let mut m = ModelConfig::tiny();
        for (k, v) in &kv {
            set_model_key(&mut m, k, v)?;
        }
        m.validate()?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_need_only_a_seed() {
        let c = ExperimentConfig::parse("seed = 3\n", None).unwrap();
        assert_eq!(c, ExperimentConfig::with_seed(3));
        assert_eq!(c.adapt.lr, 1e-4);
        assert_eq!(c.train.lr, 1e-3);
        assert_eq!((c.adapt.speakers_per_batch, c.adapt.utts_per_speaker), (8, 4));
    }

    #[test]
    fn seed_required_and_env_overrides() {
        assert!(matches!(ExperimentConfig::parse("", None), Err(Error::Config(_))));
        assert_eq!(ExperimentConfig::parse("", Some("11")).unwrap().seed, 11);
        assert_eq!(ExperimentConfig::parse("seed = 1", Some("12")).unwrap().seed, 12);
        assert!(ExperimentConfig::parse("seed = x", None).is_err());
    }

    #[test]
    fn keys_are_applied() {
        let text = "seed = 2 # trailing comment\nmodel.preset = full\nadapt.mode = bn\nadapt.groups = G2-G3\n\
                    adapt.bn_stats_refresh = false\ntrain.epochs = 3\nloss.name = ge2e\n";
        let c = ExperimentConfig::parse(text, None).unwrap();
        assert_eq!(c.model, ModelConfig::full());
        assert_eq!(c.adapt.mode, AdaptMode::Bn);
        assert_eq!(c.adapt.groups.groups(), vec![2, 3]);
        assert!(!c.adapt.bn_stats_refresh);
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.loss.name, PretrainLoss::Ge2e);
    }

    #[test]
    fn rejects_unknown_repeated_and_invalid() {
        assert!(ExperimentConfig::parse("seed = 1\ntrain.lr_max = 1", None).is_err());
        assert!(ExperimentConfig::parse("seed = 1\ntrain.lr = 1\ntrain.lr = 2", None).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nnonsense", None).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nloss.margin = 0.9", None).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nmodel.mel_bins = 20", None).is_err());
        assert!(ExperimentConfig::parse("seed = 1\nmodel.channels = 8,16,32", None).is_err());
    }

    #[test]
    fn model_text_roundtrip() {
        for m in [ModelConfig::tiny().with_classes(7), ModelConfig::full()] {
            assert_eq!(ModelConfig::from_text(&m.to_text()).unwrap(), m);
        }
    }
}
