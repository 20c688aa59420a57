//! Model checkpoints as a single JSON document.
//!
//! Floats are written with shortest round-trip formatting and parsed back
//! exactly, so a save/load cycle reproduces every parameter bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use mare_core::data::Vocab;
use mare_core::model::{Mare, MareConfig};
use mare_core::numerics::Tensor;
use mare_core::params::ParamStore;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const FORMAT: &str = "mare-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: MareConfig,
    /// Display names of the aspects, one per aspect.
    pub aspect_names: Vec<String>,
    /// Vocabulary tokens in id order.
    pub vocab: Vec<String>,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Mare, vocab: &Vocab, aspect_names: &[String]) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            config: model.config().clone(),
            aspect_names: aspect_names.to_vec(),
            vocab: vocab.tokens().to_vec(),
            params: model
                .params()
                .iter()
                .map(|(_, name, t)| NamedTensor {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn into_model(self) -> Result<(Mare, Vocab, Vec<String>), CliError> {
        if self.format != FORMAT {
            return Err(CliError::Invalid(format!("not a checkpoint (format `{}`)", self.format)));
        }
        if self.version != VERSION {
            return Err(CliError::Invalid(format!(
                "unsupported checkpoint version {} (expected {VERSION})",
                self.version
            )));
        }
        if self.vocab.len() != self.config.encoder.vocab_size {
            return Err(CliError::Invalid(format!(
                "vocabulary has {} tokens but the model expects {}",
                self.vocab.len(),
                self.config.encoder.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        for p in self.params {
            let t = Tensor::new(p.shape, p.data)
                .map_err(|e| CliError::Invalid(format!("parameter `{}`: {e}", p.name)))?;
            store.add(p.name, t);
        }
        let model = Mare::from_parts(self.config, store)?;
        Ok((model, Vocab::from_tokens(self.vocab), self.aspect_names))
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let file = File::create(path).map_err(|e| CliError::io(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer(&mut w, self).map_err(|e| CliError::Runtime(e.to_string()))?;
        w.flush().map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let file = File::open(path).map_err(|e| CliError::io(path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| CliError::Invalid(format!("{}: {e}", path.display())))
    }
}

/// Default names `aspect0`, `aspect1`, ...
pub fn default_aspect_names(k: usize) -> Vec<String> {
    (0..k).map(|a| format!("aspect{a}")).collect()
}
