//! Flat key-value run configuration shared by every subcommand.
//!
//! Sources, later ones winning: built-in defaults, the TOML config file,
//! the `METRIC_FORGE_SEED` environment variable, `--set key=value` flags.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::RerankConfig;
use crate::losses::LossConfig;
use crate::model::{ClassifierInput, FeatureTap, HeadOptions};
use crate::synthdata::{DomainShift, SynthSpec};
use crate::trainer::{TrainConfig, TrainMode};

pub const SEED_ENV: &str = "METRIC_FORGE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,

    pub n_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub noise_sigma: f64,
    pub n_cameras: usize,
    pub holdout_fraction: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation_seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift_offset: Option<Vec<f64>>,

    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub p: usize,
    pub k: usize,
    pub mode: TrainMode,
    pub feature_tap: FeatureTap,
    pub classifier_input: ClassifierInput,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,

    pub radius: f64,
    pub temperature: f64,
    pub lin_weight: f64,
    pub label_smoothing: f64,
    pub detach_weights: bool,

    pub k1: usize,
    pub k2: usize,
    pub lambda: f64,

    pub ablate_seeds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let train = TrainConfig::default();
        let rerank = RerankConfig::default();
        Self {
            seed: 0,
            n_classes: synth.n_classes,
            per_class: synth.per_class,
            dim: synth.dim,
            noise_sigma: synth.noise_sigma,
            n_cameras: synth.n_cameras,
            holdout_fraction: 0.3,
            rotation_seed: None,
            shift_offset: None,
            base_lr: train.base_lr,
            warmup_epochs: train.warmup_epochs,
            total_epochs: train.total_epochs,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            p: train.p,
            k: train.k,
            mode: train.mode,
            feature_tap: train.head.feature_tap,
            classifier_input: train.head.classifier_input,
            hidden: train.hidden,
            embedding_dim: train.embedding_dim,
            radius: train.loss.radius,
            temperature: train.loss.temperature,
            lin_weight: train.loss.lin_weight,
            label_smoothing: train.loss.label_smoothing,
            detach_weights: train.loss.detach_weights,
            k1: rerank.k1,
            k2: rerank.k2,
            lambda: rerank.lambda,
            ablate_seeds: 1,
        }
    }
}

/// Pulls the first backticked token out of a serde message, which for
/// unknown or mistyped fields is the key name.
fn key_in(message: &str) -> Option<String> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_owned())
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, value) = raw
        .split_once('=')
        .ok_or_else(|| Error::config(raw, "override must look like key=value"))?;
    let key = key.trim().to_owned();
    let value = value.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_owned()));
    Ok((key, parsed))
}

impl RunConfig {
    /// Builds a config from an optional TOML file, an optional seed from the
    /// environment, and `key=value` overrides.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                toml::from_str::<toml::Table>(&text).map_err(|e| {
                    let msg = e.message().to_owned();
                    Error::config(key_in(&msg).unwrap_or_else(|| path.display().to_string()), msg)
                })?
            }
            None => toml::Table::new(),
        };
        if let Some(raw) = env_seed {
            let seed: u64 = raw
                .trim()
                .parse()
                .map_err(|_| Error::config(SEED_ENV, format!("`{raw}` is not an unsigned integer")))?;
            let seed = i64::try_from(seed).map_err(|_| Error::config(SEED_ENV, "seed must fit in 63 bits"))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        for raw in overrides {
            let (key, value) = parse_override(raw)?;
            table.insert(key, value);
        }
        let cfg = RunConfig::deserialize(toml::Value::Table(table)).map_err(|e| {
            let msg = e.to_string();
            Error::config(key_in(&msg).unwrap_or_else(|| "config".into()), msg.trim().to_owned())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.train_config().validate()?;
        let rr = self.rerank_config();
        if rr.k2 > rr.k1 {
            return Err(Error::config("k2", "must not exceed k1"));
        }
        rr.validate(usize::MAX)?;
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("holdout_fraction", "must lie in (0, 1)"));
        }
        if self.shift_offset.is_some() && self.rotation_seed.is_none() {
            return Err(Error::config("shift_offset", "requires rotation_seed"));
        }
        if self.ablate_seeds == 0 {
            return Err(Error::config("ablate_seeds", "must be >= 1"));
        }
        Ok(())
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_classes: self.n_classes,
            per_class: self.per_class,
            dim: self.dim,
            noise_sigma: self.noise_sigma,
            n_cameras: self.n_cameras,
            seed: self.seed,
            domain_shift: self.rotation_seed.map(|rotation_seed| DomainShift {
                offset: self.shift_offset.clone().unwrap_or_else(|| vec![0.0; self.dim]),
                rotation_seed,
            }),
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            radius: self.radius,
            temperature: self.temperature,
            lin_weight: self.lin_weight,
            label_smoothing: self.label_smoothing,
            detach_weights: self.detach_weights,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            base_lr: self.base_lr,
            warmup_epochs: self.warmup_epochs,
            total_epochs: self.total_epochs,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            seed: self.seed,
            loss: self.loss_config(),
            p: self.p,
            k: self.k,
            mode: self.mode,
            head: HeadOptions {
                feature_tap: self.feature_tap,
                classifier_input: self.classifier_input,
            },
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
        }
    }

    pub fn rerank_config(&self) -> RerankConfig {
        RerankConfig {
            k1: self.k1,
            k2: self.k2,
            lambda: self.lambda,
        }
    }

    /// Defaults rendered as a TOML document, for `--help`.
    pub fn defaults_toml() -> String {
        toml::to_string(&RunConfig::default()).expect("defaults serialize")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
        assert!(RunConfig::defaults_toml().contains("radius = 0.7"));
    }

    #[test]
    fn overrides_and_env() {
        let cfg = RunConfig::resolve(None, Some("42"), &["radius=0.8".into(), "mode=lin_only".into(), "hidden=[8, 4]".into()]).unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.radius, 0.8);
        assert_eq!(cfg.mode, TrainMode::LinOnly);
        assert_eq!(cfg.hidden, vec![8, 4]);
        let cfg = RunConfig::resolve(None, Some("42"), &["seed=7".into()]).unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::resolve(None, None, &["radious=0.8".into()]).unwrap_err();
        match err {
            Error::ConfigInvalid { key, .. } => assert_eq!(key, "radious"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn bad_values_are_named() {
        let err = RunConfig::resolve(None, None, &["radius=3.0".into()]).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref key, .. } if key == "radius"), "{err}");
        let err = RunConfig::resolve(None, None, &["k2=30".into()]).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref key, .. } if key == "k2"), "{err}");
        let err = RunConfig::resolve(None, Some("abc"), &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref key, .. } if key == SEED_ENV), "{err}");
    }

    #[test]
    fn file_then_override() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "temperature = 5.0\nlin_weight = 0.6\n").unwrap();
        let cfg = RunConfig::resolve(Some(&path), None, &["lin_weight=0.2".into()]).unwrap();
        assert_eq!(cfg.temperature, 5.0);
        assert_eq!(cfg.lin_weight, 0.2);
        std::fs::write(&path, "temprature = 5.0\n").unwrap();
        let err = RunConfig::resolve(Some(&path), None, &[]).unwrap_err();
        assert!(err.to_string().contains("temprature"));
    }
}
