//! TOML run configurations.
//!
//! A run file has three optional tables:
//!
//! ```toml
//! seed = 7
//!
//! [data]
//! train = "data/train.jsonl"
//! val = "data/val.jsonl"
//! aspect_names = ["appearance", "aroma", "palate"]
//!
//! [model]
//! cliff_layer = 3
//! deletion = "hard"
//!
//! [train]
//! mode = "multitask"
//! max_epochs = 10
//! beta = 0.7
//! ```
//!
//! Relative data paths resolve against the config file's directory.
//! Omitted model fields take the desk-scale defaults; vocabulary size and
//! maximum length come from the data.

use std::path::{Path, PathBuf};

use mare_core::data::SynthGrammarConfig;
use mare_core::mac::DeletionRule;
use mare_core::model::{InitStrategy, MareConfig};
use mare_core::training::{LossWeights, MaskLossScope, TrainConfig, TrainMode};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub num_aspects: Option<usize>,
    pub aspect_names: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub model_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    /// Longest text the model accepts; defaults to the longest training text.
    pub max_text_len: Option<usize>,
    pub num_classes: Option<usize>,
    pub cliff_layer: Option<usize>,
    /// One target per aspect, or a single value for all.
    pub sparsity_targets: Option<Vec<f64>>,
    pub init_strategy: Option<InitStrategy>,
    pub gumbel_temperature: Option<f64>,
    pub deletion: Option<DeletionRule>,
    pub recompute_masks: Option<bool>,
    pub embed_std: Option<f64>,
    pub keep_bias_init: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub mode: Option<TrainMode>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
    pub mask_loss_scope: Option<MaskLossScope>,
    pub eval_batch_size: Option<usize>,
}

/// Shape facts taken from the data when the config leaves them open.
#[derive(Debug, Clone, Copy)]
pub struct DataShape {
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub num_aspects: usize,
    pub num_classes: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.val, &mut cfg.data.test].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn model_config(&self, shape: DataShape) -> Result<MareConfig, CliError> {
        let m = &self.model;
        let max_text_len = m.max_text_len.unwrap_or(shape.max_text_len);
        if max_text_len < shape.max_text_len {
            return Err(CliError::Invalid(format!(
                "model.max_text_len {max_text_len} is shorter than the longest text ({})",
                shape.max_text_len
            )));
        }
        let mut cfg = MareConfig::toy(shape.vocab_size, max_text_len, shape.num_aspects);
        let enc = &mut cfg.encoder;
        if let Some(v) = m.num_layers {
            enc.num_layers = v;
            cfg.cliff_layer = v.saturating_sub(1).max(1);
        }
        if let Some(v) = m.num_heads {
            enc.num_heads = v;
        }
        if let Some(v) = m.model_dim {
            enc.model_dim = v;
        }
        if let Some(v) = m.ffn_dim {
            enc.ffn_dim = v;
        }
        cfg.num_classes = m.num_classes.unwrap_or(shape.num_classes);
        if let Some(v) = m.cliff_layer {
            cfg.cliff_layer = v;
        }
        if let Some(t) = &m.sparsity_targets {
            cfg.sparsity_targets = match t.len() {
                1 => vec![t[0]; shape.num_aspects],
                _ => t.clone(),
            };
        }
        if let Some(v) = m.init_strategy {
            cfg.init_strategy = v;
        }
        if let Some(v) = m.gumbel_temperature {
            cfg.gumbel_temperature = v;
        }
        if let Some(v) = m.deletion {
            cfg.deletion = v;
        }
        if let Some(v) = m.recompute_masks {
            cfg.recompute_masks = v;
        }
        if let Some(v) = m.embed_std {
            cfg.embed_std = v;
        }
        if let Some(v) = m.keep_bias_init {
            cfg.keep_bias_init = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            learning_rate: t.learning_rate.unwrap_or(d.learning_rate),
            weight_decay: t.weight_decay.unwrap_or(d.weight_decay),
            batch_size: t.batch_size.unwrap_or(d.batch_size),
            max_epochs: t.max_epochs.unwrap_or(d.max_epochs),
            seed,
            mode: t.mode.unwrap_or(d.mode),
            loss_weights: LossWeights {
                beta: t.beta.unwrap_or(d.loss_weights.beta),
                gamma: t.gamma.unwrap_or(d.loss_weights.gamma),
            },
            mask_loss_scope: t.mask_loss_scope.unwrap_or(d.mask_loss_scope),
            eval_batch_size: t.eval_batch_size.unwrap_or(d.eval_batch_size),
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Synthetic corpus request: grammar plus corpus size and split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    #[serde(default = "default_examples")]
    pub examples: usize,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_num_aspects")]
    pub num_aspects: usize,
    /// Full grammar; when absent the built-in vocabulary is used.
    pub grammar: Option<SynthGrammarConfig>,
}

fn default_examples() -> usize {
    12_500
}
fn default_train_fraction() -> f64 {
    0.8
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_num_aspects() -> usize {
    3
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            examples: default_examples(),
            train_fraction: default_train_fraction(),
            val_fraction: default_val_fraction(),
            num_aspects: default_num_aspects(),
            grammar: None,
        }
    }
}

impl SynthConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }

    pub fn grammar(&self, seed: u64) -> SynthGrammarConfig {
        match &self.grammar {
            Some(g) => SynthGrammarConfig { seed, ..g.clone() },
            None => SynthGrammarConfig::with_default_vocab(self.num_aspects, seed),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let (t, v) = (self.train_fraction, self.val_fraction);
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&v) || t + v > 1.0 + 1e-12 {
            return Err(CliError::Invalid(format!(
                "split fractions train={t} val={v} must lie in [0, 1] and sum to at most 1"
            )));
        }
        if self.examples == 0 {
            return Err(CliError::Invalid("examples must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> DataShape {
        DataShape {
            vocab_size: 50,
            max_text_len: 30,
            num_aspects: 3,
            num_classes: 2,
        }
    }

    #[test]
    fn empty_config_gives_toy_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg.model_config(shape()).unwrap(), MareConfig::toy(50, 30, 3));
        assert_eq!(cfg.train_config(0).unwrap(), TrainConfig::default());
    }

    #[test]
    fn scalar_target_broadcasts() {
        let cfg: RunConfig = toml::from_str("[model]\nsparsity_targets = [0.2]\ncliff_layer = 1").unwrap();
        let m = cfg.model_config(shape()).unwrap();
        assert_eq!(m.sparsity_targets, vec![0.2; 3]);
        assert_eq!(m.cliff_layer, 1);
    }

    #[test]
    fn unknown_fields_rejected() {
        assert!(toml::from_str::<RunConfig>("[model]\nclif_layer = 1").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        let cfg: RunConfig = toml::from_str("[model]\ncliff_layer = 9").unwrap();
        assert_eq!(cfg.model_config(shape()).unwrap_err().exit_code(), 2);
        let cfg: RunConfig = toml::from_str("[train]\nbatch_size = 0").unwrap();
        assert_eq!(cfg.train_config(0).unwrap_err().exit_code(), 2);
    }
}
