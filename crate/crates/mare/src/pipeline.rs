//! Shared train/evaluate plumbing used by the commands and tests.

use std::path::Path;

use mare_core::data::{Dataset, EncodedDataset, Vocab};
use mare_core::eval::{self, Aggregation, Diagnostics, ProbeOutcome, ProbeRecord, RationaleReport, RunMetadata};
use mare_core::mac::DeletionRule;
use mare_core::model::{InitStrategy, Mare, MareConfig};
use mare_core::numerics::{RngState, Stream, Tape, Tensor};
use mare_core::training::{self, Clock, EpochMetrics, TrainConfig, TrainMode, TrainOutcome};
use serde::{Deserialize, Serialize};

use crate::config::{DataShape, RunConfig};
use crate::error::CliError;
use crate::jsonl;

/// Datasets named by a run configuration.
pub struct Corpus {
    pub train: Dataset,
    pub val: Option<Dataset>,
    pub test: Option<Dataset>,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let k = cfg.data.num_aspects;
        let load = |p: &Path| jsonl::load_jsonl(p, k).map_err(|e| CliError::Invalid(e.to_string()));
        let train_path = cfg
            .data
            .train
            .as_deref()
            .ok_or_else(|| CliError::Invalid("no training data given (data.train or --train)".into()))?;
        let train = load(train_path)?;
        let k = k.unwrap_or(train.num_aspects);
        let load_k = |p: &Path| jsonl::load_jsonl(p, Some(k)).map_err(|e| CliError::Invalid(e.to_string()));
        let train = if train.num_aspects == k { train } else { load_k(train_path)? };
        Ok(Self {
            val: cfg.data.val.as_deref().map(load_k).transpose()?,
            test: cfg.data.test.as_deref().map(load_k).transpose()?,
            train,
        })
    }
}

/// Everything needed to start training.
pub struct Prepared {
    pub vocab: Vocab,
    pub train: EncodedDataset,
    pub val: Option<EncodedDataset>,
    pub model: MareConfig,
    pub training: TrainConfig,
    pub aspect_names: Vec<String>,
}

fn num_classes(ds: &Dataset) -> usize {
    let max = ds.examples.iter().flat_map(|e| e.labels.iter().flatten()).copied().max().unwrap_or(0);
    (max + 1).max(2)
}

pub fn aspect_names(cfg: &RunConfig, k: usize) -> Result<Vec<String>, CliError> {
    match &cfg.data.aspect_names {
        Some(n) if n.len() != k => Err(CliError::Invalid(format!("{} aspect names for {k} aspects", n.len()))),
        Some(n) => Ok(n.clone()),
        None => Ok(crate::checkpoint::default_aspect_names(k)),
    }
}

pub fn prepare(cfg: &RunConfig, seed: u64, train: &Dataset, val: Option<&Dataset>) -> Result<Prepared, CliError> {
    let vocab = Vocab::build([train]);
    let max_text_len = train
        .max_len()
        .max(val.map_or(0, Dataset::max_len));
    let shape = DataShape {
        vocab_size: vocab.len(),
        max_text_len,
        num_aspects: train.num_aspects,
        num_classes: num_classes(train),
    };
    let model = cfg.model_config(shape)?;
    let training = cfg.train_config(seed)?;
    Ok(Prepared {
        train: EncodedDataset::encode(&vocab, train),
        val: val.map(|v| EncodedDataset::encode(&vocab, v)),
        aspect_names: aspect_names(cfg, train.num_aspects)?,
        vocab,
        model,
        training,
    })
}

/// Builds a fresh model from `p` (initialised from `seed`) and trains it.
pub fn train_model(
    p: &Prepared,
    seed: u64,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<(Mare, TrainOutcome), CliError> {
    let mut model = Mare::new(p.model.clone(), seed)?;
    let outcome = training::train(&mut model, &p.train, p.val.as_ref(), &p.training, clock, on_epoch)?;
    Ok((model, outcome))
}

pub fn metadata(seed: u64, cfg: &impl Serialize, mode: TrainMode) -> RunMetadata {
    let text = serde_json::to_string(cfg).unwrap_or_default();
    RunMetadata {
        seed,
        config_hash: eval::config_hash(&text),
        mode: serde_json::to_value(mode)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
    }
}

pub fn evaluate(
    model: &Mare,
    data: &EncodedDataset,
    batch_size: usize,
    aggregation: Aggregation,
    metadata: RunMetadata,
) -> Result<RationaleReport, CliError> {
    Ok(eval::evaluate(model, data, batch_size, aggregation, metadata)?)
}

/// Current special-token rows `[k, d]`.
pub fn special_rows(model: &Mare) -> Result<Tensor, CliError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let v = model
        .special_table(&mut tape, &bound)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(tape.value(v).clone())
}

/// Largest absolute difference between any two special-token rows.
pub fn special_row_spread(rows: &Tensor) -> (f64, bool) {
    let (k, d) = (rows.shape()[0], rows.shape()[1]);
    let v = rows.data();
    let mut min_pair = f64::INFINITY;
    let mut identical = true;
    for a in 0..k {
        for b in a + 1..k {
            let diff = (0..d).map(|x| (v[a * d + x] - v[b * d + x]).abs()).fold(0.0, f64::max);
            min_pair = min_pair.min(diff);
            identical &= v[a * d..(a + 1) * d] == v[b * d..(b + 1) * d];
        }
    }
    (if min_pair.is_finite() { min_pair } else { 0.0 }, identical)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub deletion: DeletionRule,
    pub measured: usize,
    pub skipped: usize,
    pub max_leakage: f64,
    pub max_deleted_drift: f64,
}

/// Runs the deletion-completeness probe for every ordered aspect pair on
/// up to `limit` examples, using the model's own noise-free masks.
pub fn probe(model: &Mare, data: &EncodedDataset, limit: usize, seed: u64) -> Result<(Diagnostics, ProbeSummary), CliError> {
    let k = model.config().num_aspects;
    let all: Vec<usize> = (0..k).collect();
    let mut rng = RngState::stream(seed, Stream::Probe);
    let mut probes = Vec::new();
    for (i, ex) in data.examples.iter().take(limit).enumerate() {
        let inf = model.infer(&[ex.ids.clone()], &all)?;
        let len = ex.ids.len();
        let mask = inf
            .final_masks
            .clone()
            .reshaped(vec![k, len])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    let outcome = eval::deletion_completeness_probe(model, &ex.ids, &mask, a, b, &mut rng)?;
                    probes.push(ProbeRecord {
                        example: i,
                        aspect: a,
                        other: b,
                        outcome,
                    });
                }
            }
        }
    }
    let mut summary = ProbeSummary {
        deletion: model.config().deletion,
        measured: 0,
        skipped: 0,
        max_leakage: 0.0,
        max_deleted_drift: 0.0,
    };
    for p in &probes {
        match &p.outcome {
            ProbeOutcome::Measured {
                leakage, deleted_drift, ..
            } => {
                summary.measured += 1;
                summary.max_leakage = summary.max_leakage.max(*leakage);
                summary.max_deleted_drift = summary.max_deleted_drift.max(*deleted_drift);
            }
            ProbeOutcome::Skipped { .. } => summary.skipped += 1,
        }
    }
    Ok((Diagnostics { probes }, summary))
}

/// One cell of the deletion × mode × initialisation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub deletion: DeletionRule,
    pub mode: TrainMode,
    pub init: InitStrategy,
    pub f1: Vec<Option<f64>>,
    pub avg_f1: Option<f64>,
    pub accuracy: Vec<Option<f64>>,
    pub sparsity: Vec<f64>,
    pub steps: usize,
    pub mask_computations: usize,
    pub wall_ms: f64,
    /// Smallest max-abs difference between two special-token rows.
    pub special_row_spread: f64,
    pub special_rows_identical: bool,
    pub error: Option<String>,
}

impl AblationCell {
    fn failed(deletion: DeletionRule, mode: TrainMode, init: InitStrategy, error: String) -> Self {
        Self {
            deletion,
            mode,
            init,
            f1: Vec::new(),
            avg_f1: None,
            accuracy: Vec::new(),
            sparsity: Vec::new(),
            steps: 0,
            mask_computations: 0,
            wall_ms: 0.0,
            special_row_spread: 0.0,
            special_rows_identical: false,
            error: Some(error),
        }
    }
}

/// Trains one grid cell on `train`, scoring on `eval`. Errors are kept in
/// the cell rather than aborting the grid.
#[allow(clippy::too_many_arguments)]
pub fn ablation_cell(
    base: &RunConfig,
    seed: u64,
    train: &Dataset,
    eval_data: &Dataset,
    deletion: DeletionRule,
    mode: TrainMode,
    init: InitStrategy,
    clock: &dyn Clock,
) -> AblationCell {
    let run = || -> Result<AblationCell, CliError> {
        let mut cfg = base.clone();
        cfg.model.deletion = Some(deletion);
        cfg.model.init_strategy = Some(init);
        cfg.train.mode = Some(mode);
        let p = prepare(&cfg, seed, train, None)?;
        let (model, outcome) = train_model(&p, seed, clock, &mut |_| {})?;
        let data = EncodedDataset::encode(&p.vocab, eval_data);
        let report = evaluate(&model, &data, p.training.eval_batch_size, Aggregation::Micro, metadata(seed, &cfg, mode))?;
        let (spread, identical) = special_row_spread(&special_rows(&model)?);
        Ok(AblationCell {
            deletion,
            mode,
            init,
            f1: report.f1s(),
            avg_f1: report.avg_f1(),
            accuracy: report.aspects.iter().map(|a| a.accuracy).collect(),
            sparsity: report.aspects.iter().map(|a| a.sparsity).collect(),
            steps: outcome.epochs.iter().map(|e| e.steps).sum(),
            mask_computations: outcome.epochs.iter().map(|e| e.mask_computations).sum(),
            wall_ms: outcome.epochs.iter().map(|e| e.wall_ms).sum(),
            special_row_spread: spread,
            special_rows_identical: identical,
            error: None,
        })
    };
    run().unwrap_or_else(|e| AblationCell::failed(deletion, mode, init, e.to_string()))
}

pub fn ablation_markdown(cells: &[AblationCell]) -> String {
    let mut out = String::from("| deletion | mode | init | F1 per aspect | Avg F1 | mask computations | wall ms | special rows identical |\n|---|---|---|---|---:|---:|---:|---|\n");
    for c in cells {
        let f1 = c
            .f1
            .iter()
            .map(|f| f.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into()))
            .collect::<Vec<_>>()
            .join(" / ");
        let avg = c.avg_f1.map(|x| format!("{:.1}", x * 100.0)).unwrap_or_else(|| "-".into());
        match &c.error {
            Some(e) => out.push_str(&format!(
                "| {} | {} | {} | failed: {e} | - | - | - | - |\n",
                label(&c.deletion),
                label(&c.mode),
                label(&c.init)
            )),
            None => out.push_str(&format!(
                "| {} | {} | {} | {f1} | {avg} | {} | {:.0} | {} |\n",
                label(&c.deletion),
                label(&c.mode),
                label(&c.init),
                c.mask_computations,
                c.wall_ms,
                c.special_rows_identical
            )),
        }
    }
    out
}


fn label<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_default()
}
