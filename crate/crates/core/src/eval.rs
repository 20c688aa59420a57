//! Token-level rationale metrics, accuracy, deletion-completeness probing,
//! training-mode resource comparison and multi-seed stability.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::{length_batches, EncodedDataset};
use crate::mac::DeletionRule;
use crate::model::{cliff_active, extract_rationales, mask_spans, ForwardOptions, Mare, ModelError, Perturbation};
use crate::numerics::{RngState, Tape, Tensor};
use crate::training::{self, Clock, EpochMetrics, TrainConfig, TrainError, TrainMode};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has {pred} tokens but gold has {gold}")]
    LengthMismatch { pred: usize, gold: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("dataset has no gold rationales")]
    NoGold,
    #[error("at least {needed} seeds are required, got {got}")]
    TooFewSeeds { needed: usize, got: usize },
    #[error("dataset has {data} aspects but the model has {model}")]
    AspectCount { data: usize, model: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Pooled true-positive / false-positive / false-negative token counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrfCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl PrfCounts {
    pub fn add(&mut self, pred: &[u8], gold: &[u8]) -> Result<(), EvalError> {
        if pred.len() != gold.len() {
            return Err(EvalError::LengthMismatch {
                pred: pred.len(),
                gold: gold.len(),
            });
        }
        for (&p, &g) in pred.iter().zip(gold) {
            match (p != 0, g != 0) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
        Ok(())
    }

    pub fn prf(&self) -> Prf {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Prf {
            precision,
            recall,
            f1: f1(precision, recall),
        }
    }
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn token_prf(pred: &[u8], gold: &[u8]) -> Result<Prf, EvalError> {
    let mut c = PrfCounts::default();
    c.add(pred, gold)?;
    Ok(c.prf())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Token counts pooled over the corpus.
    #[default]
    Micro,
    /// Per-example P/R averaged, F1 from the averages.
    Macro,
}

/// Corpus P/R/F1 over `(pred, gold)` pairs.
pub fn corpus_prf<'a>(
    pairs: impl IntoIterator<Item = (&'a [u8], &'a [u8])>,
    aggregation: Aggregation,
) -> Result<Prf, EvalError> {
    let mut pooled = PrfCounts::default();
    let (mut p_sum, mut r_sum, mut n) = (0.0, 0.0, 0usize);
    for (pred, gold) in pairs {
        let mut c = PrfCounts::default();
        c.add(pred, gold)?;
        let prf = c.prf();
        p_sum += prf.precision;
        r_sum += prf.recall;
        n += 1;
        pooled.tp += c.tp;
        pooled.fp += c.fp;
        pooled.fn_ += c.fn_;
    }
    if n == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(match aggregation {
        Aggregation::Micro => pooled.prf(),
        Aggregation::Macro => {
            let (p, r) = (p_sum / n as f64, r_sum / n as f64);
            Prf {
                precision: p,
                recall: r,
                f1: f1(p, r),
            }
        }
    })
}

/// Selected tokens over all tokens.
pub fn sparsity<'a>(masks: impl IntoIterator<Item = &'a [u8]>) -> Result<f64, EvalError> {
    let (mut sel, mut total) = (0usize, 0usize);
    for m in masks {
        sel += m.iter().filter(|&&x| x != 0).count();
        total += m.len();
    }
    if total == 0 {
        return Err(EvalError::EmptyCorpus);
    }
    Ok(sel as f64 / total as f64)
}

/// Noise-free predictions for every aspect of every example.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    /// `[example][aspect]`.
    pub labels: Vec<Vec<usize>>,
    /// `[example][aspect][token]` final-layer selections.
    pub masks: Vec<Vec<Vec<u8>>>,
}

pub fn predict(model: &Mare, data: &EncodedDataset, batch_size: usize) -> Result<Predictions, EvalError> {
    let k = model.config().num_aspects;
    if data.num_aspects != k {
        return Err(EvalError::AspectCount {
            data: data.num_aspects,
            model: k,
        });
    }
    let n = data.len();
    let order: Vec<usize> = (0..n).collect();
    let lengths: Vec<usize> = data.examples.iter().map(|e| e.ids.len()).collect();
    let all: Vec<usize> = (0..k).collect();
    let mut labels = vec![Vec::new(); n];
    let mut masks = vec![Vec::new(); n];
    for batch in length_batches(&order, &lengths, batch_size) {
        let ids: Vec<Vec<usize>> = batch.iter().map(|&i| data.examples[i].ids.clone()).collect();
        let inf = model.infer(&ids, &all)?;
        let preds = inf.predictions();
        let rats = extract_rationales(&inf.final_masks, &inf.aspects);
        for ((&i, p), r) in batch.iter().zip(preds).zip(rats) {
            labels[i] = p;
            masks[i] = r.into_iter().map(|r| r.selected).collect();
        }
    }
    Ok(Predictions { labels, masks })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectMetrics {
    pub aspect: usize,
    pub sparsity: f64,
    /// `None` when no example is labelled for this aspect.
    pub accuracy: Option<f64>,
    /// `None` when no example carries a gold rationale for this aspect.
    pub prf: Option<Prf>,
    pub labelled: usize,
    pub annotated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub config_hash: String,
    pub mode: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExampleSpans {
    pub example: usize,
    /// Inclusive token ranges per aspect.
    pub spans: Vec<Vec<(usize, usize)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleReport {
    pub metadata: RunMetadata,
    pub aggregation: Aggregation,
    pub aspects: Vec<AspectMetrics>,
    pub examples: Vec<ExampleSpans>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

impl RationaleReport {
    /// Mean F1 over aspects with gold rationales.
    pub fn avg_f1(&self) -> Option<f64> {
        let f: Vec<f64> = self.aspects.iter().filter_map(|a| a.prf.map(|p| p.f1)).collect();
        (!f.is_empty()).then(|| f.iter().sum::<f64>() / f.len() as f64)
    }

    pub fn f1s(&self) -> Vec<Option<f64>> {
        self.aspects.iter().map(|a| a.prf.map(|p| p.f1)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub probes: Vec<ProbeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub example: usize,
    pub aspect: usize,
    pub other: usize,
    pub outcome: ProbeOutcome,
}

/// Scores predictions against labels and gold rationales. Unannotated
/// aspects are left out of the corresponding denominators.
pub fn score(
    preds: &Predictions,
    data: &EncodedDataset,
    aggregation: Aggregation,
    metadata: RunMetadata,
) -> Result<RationaleReport, EvalError> {
    if data.is_empty() {
        return Err(EvalError::EmptyCorpus);
    }
    let k = data.num_aspects;
    let mut aspects = Vec::with_capacity(k);
    for a in 0..k {
        let s = sparsity(preds.masks.iter().map(|m| m[a].as_slice()))?;
        let (mut correct, mut labelled) = (0usize, 0usize);
        for (ex, p) in data.examples.iter().zip(&preds.labels) {
            if let Some(y) = ex.labels[a] {
                labelled += 1;
                correct += usize::from(p[a] == y);
            }
        }
        let pairs: Vec<(&[u8], &[u8])> = data
            .examples
            .iter()
            .zip(&preds.masks)
            .filter_map(|(ex, m)| ex.gold[a].as_deref().map(|g| (m[a].as_slice(), g)))
            .collect();
        let annotated = pairs.len();
        let prf = if annotated == 0 {
            None
        } else {
            Some(corpus_prf(pairs, aggregation)?)
        };
        aspects.push(AspectMetrics {
            aspect: a,
            sparsity: s,
            accuracy: (labelled > 0).then(|| correct as f64 / labelled as f64),
            prf,
            labelled,
            annotated,
        });
    }
    let examples = preds
        .masks
        .iter()
        .enumerate()
        .map(|(i, m)| ExampleSpans {
            example: i,
            spans: m.iter().map(|x| mask_spans(x)).collect(),
        })
        .collect();
    Ok(RationaleReport {
        metadata,
        aggregation,
        aspects,
        examples,
        diagnostics: None,
    })
}

pub fn evaluate(
    model: &Mare,
    data: &EncodedDataset,
    batch_size: usize,
    aggregation: Aggregation,
    metadata: RunMetadata,
) -> Result<RationaleReport, EvalError> {
    let preds = predict(model, data, batch_size)?;
    score(&preds, data, aggregation, metadata)
}

/// 64-bit FNV-1a, used to fingerprint serialised configurations.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn config_hash(serialised: &str) -> String {
    format!("{:016x}", fnv1a64(serialised.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ProbeOutcome {
    Measured {
        /// Max absolute change of the probed aspect's logits.
        leakage: f64,
        /// Max absolute change of the final states of tokens no aspect selects.
        deleted_drift: f64,
        perturbed: Vec<usize>,
        /// Whether the mask structurally isolates the perturbed tokens from
        /// the probed aspect's special token.
        isolated: bool,
    },
    Skipped {
        reason: String,
    },
}

/// Perturbs, at the cliff layer input, the hidden states of tokens selected
/// for `other` but not for `aspect`, and measures how far `aspect`'s logits
/// move. The controller is frozen: `mask` (`[k, L]`, binary) is used at
/// every masked layer.
pub fn deletion_completeness_probe(
    model: &Mare,
    ids: &[usize],
    mask: &Tensor,
    aspect: usize,
    other: usize,
    rng: &mut RngState,
) -> Result<ProbeOutcome, EvalError> {
    let cfg = model.config();
    let k = cfg.num_aspects;
    let len = ids.len();
    let d = cfg.encoder.model_dim;
    if aspect >= k || other >= k {
        return Err(ModelError::AspectOutOfRange {
            aspect: aspect.max(other),
            num_aspects: k,
        }
        .into());
    }
    if mask.shape() != [k, len] {
        return Err(ModelError::Config(format!("probe mask must be [{k}, {len}], got {:?}", mask.shape())).into());
    }
    if aspect == other {
        return Ok(ProbeOutcome::Skipped {
            reason: "aspect pair is not distinct".into(),
        });
    }
    let m = mask.data();
    let sel = |a: usize, t: usize| m[a * len + t] != 0.0;
    let perturbed: Vec<usize> = (0..len).filter(|&t| sel(other, t) && !sel(aspect, t)).collect();
    if perturbed.is_empty() {
        return Ok(ProbeOutcome::Skipped {
            reason: format!("no token is selected for aspect {other} without aspect {aspect}"),
        });
    }
    let masked_layers = (1..=cfg.encoder.num_layers)
        .filter(|&l| cliff_active(l, cfg.cliff_layer))
        .count();
    let isolated = match cfg.deletion {
        DeletionRule::Hard => !hard_reaches(m, k, len, &perturbed, aspect, masked_layers),
        DeletionRule::Amd => false,
    };
    if cfg.deletion == DeletionRule::Hard && !isolated {
        return Ok(ProbeOutcome::Skipped {
            reason: format!("aspects {aspect} and {other} are not disjoint on this example"),
        });
    }
    let over: Vec<Tensor> = vec![mask.clone().reshaped(vec![1, k, len]).map_err(ModelError::from)?; masked_layers];
    let values = Tensor::new(vec![perturbed.len(), d], rng.normal_vec(perturbed.len() * d, 1.0)).map_err(ModelError::from)?;
    let pert = Perturbation {
        layer: cfg.cliff_layer,
        positions: perturbed.iter().map(|t| k + t).collect(),
        values,
    };
    let all: Vec<usize> = (0..k).collect();
    let run = |p: Option<&Perturbation>| -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let mut opts = ForwardOptions::argmax();
        opts.mask_override = Some(&over);
        opts.perturb = p;
        let out = model.forward(&mut tape, &bound, &[ids.to_vec()], &all, &mut opts)?;
        let last = *out.hidden.last().expect("at least one layer");
        Ok((tape.value(out.logits).clone(), tape.value(last).clone()))
    };
    let (base_logits, base_h) = run(None)?;
    let (p_logits, p_h) = run(Some(&pert))?;
    let c = cfg.num_classes;
    let leakage = (0..c)
        .map(|j| libm::fabs(base_logits.data()[aspect * c + j] - p_logits.data()[aspect * c + j]))
        .fold(0.0, f64::max);
    let deleted: Vec<usize> = (0..len).filter(|&t| (0..k).all(|a| !sel(a, t))).collect();
    let mut deleted_drift: f64 = 0.0;
    for t in deleted {
        let row = (k + t) * d;
        for x in 0..d {
            deleted_drift = deleted_drift.max(libm::fabs(base_h.data()[row + x] - p_h.data()[row + x]));
        }
    }
    Ok(ProbeOutcome::Measured {
        leakage,
        deleted_drift,
        perturbed,
        isolated,
    })
}

/// Whether influence from `start` tokens can reach special token `aspect`
/// through `layers` hard-deletion attention steps.
fn hard_reaches(m: &[f64], k: usize, len: usize, start: &[usize], aspect: usize, layers: usize) -> bool {
    let p = k + len;
    let member = |row: usize, a: usize| if row < k { row == a } else { m[a * len + row - k] != 0.0 };
    let mut reached = vec![false; p];
    for &t in start {
        reached[k + t] = true;
    }
    for _ in 0..layers {
        let prev = reached.clone();
        for (i, r) in reached.iter_mut().enumerate() {
            if *r {
                continue;
            }
            *r = (0..p).any(|j| prev[j] && (0..k).any(|a| member(i, a) && member(j, a)));
        }
    }
    reached[aspect]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub mode: TrainMode,
    pub steps: usize,
    pub mask_computations: usize,
    pub wall_ms: f64,
    pub peak_live_bytes: usize,
    pub val_acc: Vec<Option<f64>>,
}

impl ResourceRow {
    pub fn mask_computations_per_step(&self) -> f64 {
        self.mask_computations as f64 / self.steps.max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceTable {
    pub multitask: ResourceRow,
    pub collaborative: ResourceRow,
}

impl ResourceTable {
    /// Controller evaluations per training step, collaborative over multitask.
    pub fn mask_ratio(&self) -> f64 {
        self.collaborative.mask_computations_per_step() / self.multitask.mask_computations_per_step()
    }

    /// Relative savings of multitask in (wall time, peak live bytes).
    pub fn savings(&self) -> (f64, f64) {
        let rel = |m: f64, c: f64| if c > 0.0 { 1.0 - m / c } else { 0.0 };
        (
            rel(self.multitask.wall_ms, self.collaborative.wall_ms),
            rel(self.multitask.peak_live_bytes as f64, self.collaborative.peak_live_bytes as f64),
        )
    }
}

/// One training epoch in each mode from the same initial model and seed.
pub fn resource_compare(
    model: &Mare,
    train: &EncodedDataset,
    val: Option<&EncodedDataset>,
    cfg: &TrainConfig,
    clock: &dyn Clock,
) -> Result<ResourceTable, EvalError> {
    let row = |mode: TrainMode| -> Result<ResourceRow, EvalError> {
        let mut m = model.clone();
        let c = TrainConfig {
            mode,
            max_epochs: 1,
            ..cfg.clone()
        };
        let out = training::train(&mut m, train, val, &c, clock, &mut |_: &EpochMetrics| {})?;
        let e = out.epochs.last().expect("one epoch");
        Ok(ResourceRow {
            mode,
            steps: e.steps,
            mask_computations: e.mask_computations,
            wall_ms: e.wall_ms,
            peak_live_bytes: e.peak_live_bytes,
            val_acc: e.val_acc.clone(),
        })
    };
    Ok(ResourceTable {
        multitask: row(TrainMode::Multitask)?,
        collaborative: row(TrainMode::Collaborative)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub f1: Option<Vec<Option<f64>>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: Vec<SeedOutcome>,
    /// Per aspect, over successful runs with gold rationales.
    pub mean: Vec<Option<f64>>,
    /// Sample standard deviation per aspect; `None` with fewer than two values.
    pub std: Vec<Option<f64>>,
    pub complete: bool,
}

/// Runs `recipe` (train + evaluate, returning per-aspect F1) once per seed.
/// A failing run is recorded and the remaining seeds still run.
pub fn multi_seed_stability<E: ToString>(
    seeds: &[u64],
    num_aspects: usize,
    mut recipe: impl FnMut(u64) -> Result<Vec<Option<f64>>, E>,
) -> Result<StabilityReport, EvalError> {
    if seeds.len() < 2 {
        return Err(EvalError::TooFewSeeds {
            needed: 2,
            got: seeds.len(),
        });
    }
    let runs: Vec<SeedOutcome> = seeds
        .iter()
        .map(|&seed| match recipe(seed) {
            Ok(f1) => SeedOutcome {
                seed,
                f1: Some(f1),
                error: None,
            },
            Err(e) => SeedOutcome {
                seed,
                f1: None,
                error: Some(e.to_string()),
            },
        })
        .collect();
    let mut mean = Vec::with_capacity(num_aspects);
    let mut std = Vec::with_capacity(num_aspects);
    for a in 0..num_aspects {
        let xs: Vec<f64> = runs
            .iter()
            .filter_map(|r| r.f1.as_ref().and_then(|f| f.get(a).copied().flatten()))
            .collect();
        let (m, s) = mean_std(&xs);
        mean.push(m);
        std.push(s);
    }
    Ok(StabilityReport {
        complete: runs.iter().all(|r| r.error.is_none()),
        runs,
        mean,
        std,
    })
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(m), None);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (Some(m), Some(libm::sqrt(var)))
}
