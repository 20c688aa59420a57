//! Losses, the balanced round-robin aspect sampler, AdamW and the training
//! loop.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{length_batches, EncodedDataset};
use crate::eval::{self, EvalError};
use crate::mac::TokenMask;
use crate::model::{ForwardOptions, Mare, MareOutput, ModelError};
use crate::numerics::{NumericsError, RngState, Stream, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("aspect {0} has no training batches")]
    EmptyStream(usize),
    #[error("training set is empty")]
    EmptyData,
    #[error("loss diverged at epoch {epoch}, step {step}: {component} = {value}; parameters restored to the start of the epoch")]
    Diverged {
        epoch: usize,
        step: usize,
        component: &'static str,
        value: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("validation failed: {0}")]
    Eval(String),
}

impl From<EvalError> for TrainError {
    fn from(e: EvalError) -> Self {
        TrainError::Eval(format!("{e}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 0.7, gamma: 0.7 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !v.is_finite() || v < 0.0 {
                return Err(TrainError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Each step trains one aspect on a batch from that aspect's stream.
    Multitask,
    /// Each step trains all aspects jointly.
    Collaborative,
}

impl FromStr for TrainMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "multitask" => Ok(Self::Multitask),
            "collaborative" => Ok(Self::Collaborative),
            _ => Err(format!("unknown training mode `{s}` (expected multitask or collaborative)")),
        }
    }
}

/// Which layers' masks the sparsity and continuity penalties see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLossScope {
    #[default]
    FinalLayer,
    AllLayers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub mask_loss_scope: MaskLossScope,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Batch size used for validation inference.
    #[serde(default = "default_eval_batch")]
    pub eval_batch_size: usize,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_eval_batch() -> usize {
    128
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 0.0,
            batch_size: 32,
            max_epochs: 10,
            seed: 0,
            mode: TrainMode::Multitask,
            loss_weights: LossWeights::default(),
            mask_loss_scope: MaskLossScope::FinalLayer,
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            eval_batch_size: default_eval_batch(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive".into());
        }
        self.loss_weights.validate()
    }
}

/// Mean negative log-likelihood of `labels` under softmax(`logits`), over the
/// labelled rows of `[N, C]`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[Option<usize>]) -> Result<Var, NumericsError> {
    tape.cross_entropy(logits, labels)
}

/// Mean over (example, aspect row) of `|mean_t m_t − target_row|` for masks
/// `[B, k', L]`; `targets` has one entry per row.
pub fn sparsity_loss(tape: &mut Tape, mask: Var, targets: &[f64]) -> Result<Var, NumericsError> {
    let s = tape.shape(mask).to_vec();
    if s.len() != 3 || s[2] == 0 {
        return Err(NumericsError::InvalidShape { shape: s });
    }
    let (b, rows, len) = (s[0], s[1], s[2]);
    if targets.len() != rows {
        return Err(NumericsError::ShapeMismatch {
            op: "sparsity_loss",
            left: vec![rows],
            right: vec![targets.len()],
        });
    }
    let sum = tape.sum_axis(mask, 2)?;
    let mean = tape.scale(sum, 1.0 / len as f64);
    let mean = tape.reshape(mean, &[b, rows])?;
    let t: Vec<f64> = (0..b).flat_map(|_| targets.iter().copied()).collect();
    let t = tape.constant(Tensor::new(vec![b, rows], t)?);
    let dev = tape.sub(mean, t)?;
    let dev = tape.abs(dev);
    Ok(tape.mean(dev))
}

/// Transitions between neighbouring mask entries, normalised by
/// `rows · (L − 1)` and averaged over the batch; masks `[B, k', L]`, `L ≥ 2`.
pub fn continuity_loss(tape: &mut Tape, mask: Var) -> Result<Var, NumericsError> {
    let s = tape.shape(mask).to_vec();
    if s.len() != 3 {
        return Err(NumericsError::InvalidShape { shape: s });
    }
    if s[2] < 2 {
        return Err(NumericsError::Contract("continuity loss needs at least two tokens"));
    }
    let len = s[2];
    let next = tape.narrow(mask, 2, 1, len - 1)?;
    let prev = tape.narrow(mask, 2, 0, len - 1)?;
    let diff = tape.sub(next, prev)?;
    let diff = tape.abs(diff);
    Ok(tape.mean(diff))
}

/// `ce + β·sparse + γ·cont`.
pub fn total_loss(tape: &mut Tape, ce: Var, sparse: Var, cont: Var, w: LossWeights) -> Result<Var, NumericsError> {
    let s = tape.scale(sparse, w.beta);
    let c = tape.scale(cont, w.gamma);
    let l = tape.add(ce, s)?;
    tape.add(l, c)
}

/// Loss graph handles for one step.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ce: Var,
    pub sparse: Var,
    pub cont: Var,
}

/// Builds the step loss from a forward output. `labels[b]` holds the labels
/// of example `b` for every aspect.
pub fn step_loss(
    tape: &mut Tape,
    model: &Mare,
    out: &MareOutput,
    labels: &[Vec<Option<usize>>],
    weights: LossWeights,
    scope: MaskLossScope,
) -> Result<LossParts, NumericsError> {
    let cfg = model.config();
    let b = labels.len();
    let rows = out.aspects.len();
    let flat: Vec<Option<usize>> = labels
        .iter()
        .flat_map(|l| out.aspects.iter().map(move |&a| l[a]))
        .collect();
    let logits = tape.reshape(out.logits, &[b * rows, cfg.num_classes])?;
    let ce = cross_entropy(tape, logits, &flat)?;
    let targets: Vec<f64> = out.aspects.iter().map(|&a| cfg.sparsity_targets[a]).collect();
    let masks: Vec<&TokenMask> = match scope {
        MaskLossScope::FinalLayer => vec![&out.final_masks],
        MaskLossScope::AllLayers => out.layer_masks.iter().map(|m| &m.token_mask).collect(),
    };
    let mut sparse_terms = Vec::with_capacity(masks.len());
    let mut cont_terms = Vec::with_capacity(masks.len());
    for m in &masks {
        sparse_terms.push(sparsity_loss(tape, m.keep, &targets)?);
        cont_terms.push(continuity_loss(tape, m.keep)?);
    }
    let avg = |tape: &mut Tape, terms: &[Var]| -> Result<Var, NumericsError> {
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = tape.add(acc, t)?;
        }
        Ok(tape.scale(acc, 1.0 / terms.len() as f64))
    };
    let sparse = avg(tape, &sparse_terms)?;
    let cont = avg(tape, &cont_terms)?;
    let total = total_loss(tape, ce, sparse, cont, weights)?;
    Ok(LossParts {
        total,
        ce,
        sparse,
        cont,
    })
}

/// Interleaves per-aspect batch streams as `0, 1, …, k−1, 0, …` until the
/// longest stream has been emitted once. A shorter stream that runs out is
/// reshuffled and replayed from the start, so every cycle is complete and
/// per-epoch aspect counts are all equal to `k·max_len / k`.
pub fn balanced_round_robin<T: Clone>(streams: &[Vec<T>], rng: &mut RngState) -> Result<Vec<(usize, T)>, TrainError> {
    if let Some(j) = streams.iter().position(Vec::is_empty) {
        return Err(TrainError::EmptyStream(j));
    }
    let longest = streams.iter().map(Vec::len).max().unwrap_or(0);
    let mut queues: Vec<Vec<T>> = streams.to_vec();
    let mut cursor = vec![0usize; streams.len()];
    let mut out = Vec::with_capacity(longest * streams.len());
    for _ in 0..longest {
        for (j, q) in queues.iter_mut().enumerate() {
            if cursor[j] == q.len() {
                rng.shuffle(q);
                cursor[j] = 0;
            }
            out.push((j, q[cursor[j]].clone()));
            cursor[j] += 1;
        }
    }
    Ok(out)
}

/// Assigns every example to one of its labelled aspects, always choosing
/// the aspect with the fewest assignments so far (ties → lowest index).
pub fn assign_aspects(data: &EncodedDataset, order: &[usize]) -> Vec<Vec<usize>> {
    let mut streams = vec![Vec::new(); data.num_aspects];
    for &i in order {
        let best = data.examples[i]
            .labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_some())
            .map(|(a, _)| a)
            .min_by_key(|&a| (streams[a].len(), a));
        if let Some(a) = best {
            streams[a].push(i);
        }
    }
    streams
}

/// One step of the schedule: example indices and the aspects trained on them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScheduledBatch {
    pub examples: Vec<usize>,
    pub aspects: Vec<usize>,
}

/// The batch order of one epoch.
pub fn epoch_schedule(
    data: &EncodedDataset,
    mode: TrainMode,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<Vec<ScheduledBatch>, TrainError> {
    if data.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let k = data.num_aspects;
    let mut order: Vec<usize> = (0..data.len()).collect();
    rng.shuffle(&mut order);
    let lengths: Vec<usize> = data.examples.iter().map(|e| e.ids.len()).collect();
    match mode {
        TrainMode::Collaborative => {
            let mut batches = length_batches(&order, &lengths, batch_size);
            rng.shuffle(&mut batches);
            Ok(batches
                .into_iter()
                .map(|examples| ScheduledBatch {
                    examples,
                    aspects: (0..k).collect(),
                })
                .collect())
        }
        TrainMode::Multitask => {
            let streams: Vec<Vec<Vec<usize>>> = assign_aspects(data, &order)
                .iter()
                .map(|s| {
                    let mut b = length_batches(s, &lengths, batch_size);
                    rng.shuffle(&mut b);
                    b
                })
                .collect();
            Ok(balanced_round_robin(&streams, rng)?
                .into_iter()
                .map(|(a, examples)| ScheduledBatch {
                    examples,
                    aspects: vec![a],
                })
                .collect())
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    /// Per-parameter step counts; parameters outside a step's scope keep
    /// their moments and count.
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &[Tensor], cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: vec![0; params.len()],
        }
    }

    /// Updates `params[i]` for every `i` with `scope[i]`.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], scope: &[bool]) {
        for (i, p) in params.iter_mut().enumerate() {
            if !scope[i] {
                continue;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
            let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads[i].data();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                *w -= self.lr * (mh / (libm::sqrt(vh) + self.eps) + self.weight_decay * *w);
            }
        }
    }
}

/// Wall-clock source; `no_std` builds use [`NoClock`].
pub trait Clock {
    fn now_ms(&self) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now_ms(&self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: TrainMode,
    pub steps: usize,
    pub loss: f64,
    pub ce: f64,
    pub sparse: f64,
    pub cont: f64,
    /// Per aspect; `None` without validation data or labels.
    pub val_acc: Vec<Option<f64>>,
    pub val_sparsity: Vec<Option<f64>>,
    pub mask_computations: usize,
    pub wall_ms: f64,
    pub peak_live_bytes: usize,
}

impl EpochMetrics {
    /// Copy with timing zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochMetrics>,
}

/// Parameters an aspect-`j` step may change: everything except the other
/// aspects' controller projections and heads.
pub fn step_scope(model: &Mare, aspects: &[usize]) -> Vec<bool> {
    let mut scope = vec![true; model.params().len()];
    for j in 0..model.config().num_aspects {
        if !aspects.contains(&j) {
            for id in model.aspect_param_ids(j) {
                scope[id.index()] = false;
            }
        }
    }
    scope
}

fn scalar(tape: &Tape, v: Var) -> Result<f64, NumericsError> {
    let t = tape.value(v);
    t.item().ok_or_else(|| NumericsError::NotScalar { shape: t.shape().to_vec() })
}

fn check_finite(v: f64, component: &'static str, epoch: usize, step: usize) -> Result<(), TrainError> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Diverged {
            epoch,
            step,
            component,
            value: v,
        })
    }
}

/// Trains `model` in place. `on_epoch` receives each epoch's metrics as soon
/// as they are available. On divergence the parameters are restored to the
/// last completed epoch and an error is returned.
pub fn train(
    model: &mut Mare,
    train: &EncodedDataset,
    val: Option<&EncodedDataset>,
    cfg: &TrainConfig,
    clock: &dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let k = model.config().num_aspects;
    if train.num_aspects != k {
        return Err(TrainError::Config(format!(
            "training data has {} aspects but the model has {k}",
            train.num_aspects
        )));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut shuffle_rng = RngState::stream(cfg.seed, Stream::Shuffle);
    let mut gumbel_rng = RngState::stream(cfg.seed, Stream::Gumbel);
    let mut opt = AdamW::new(model.params().tensors(), cfg);
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    for epoch in 1..=cfg.max_epochs {
        let start = clock.now_ms();
        let snapshot = model.params().tensors().to_vec();
        let schedule = epoch_schedule(train, cfg.mode, cfg.batch_size, &mut shuffle_rng)?;
        let (mut loss, mut ce, mut sparse, mut cont) = (0.0, 0.0, 0.0, 0.0);
        let mut mask_computations = 0;
        let mut peak = 0;
        for (step, sb) in schedule.iter().enumerate() {
            let ids: Vec<Vec<usize>> = sb.examples.iter().map(|&i| train.examples[i].ids.clone()).collect();
            let labels: Vec<Vec<Option<usize>>> =
                sb.examples.iter().map(|&i| train.examples[i].labels.clone()).collect();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let mut opts = ForwardOptions::sampled(&mut gumbel_rng);
            let out = model.forward(&mut tape, &bound, &ids, &sb.aspects, &mut opts)?;
            mask_computations += out.mask_computations;
            let parts = step_loss(&mut tape, model, &out, &labels, cfg.loss_weights, cfg.mask_loss_scope)?;
            let vals = [
                ("loss", scalar(&tape, parts.total)?),
                ("ce", scalar(&tape, parts.ce)?),
                ("sparse", scalar(&tape, parts.sparse)?),
                ("cont", scalar(&tape, parts.cont)?),
            ];
            for (name, v) in vals {
                if let Err(e) = check_finite(v, name, epoch, step) {
                    model.params_mut().set_tensors(snapshot)?;
                    return Err(e);
                }
            }
            loss += vals[0].1;
            ce += vals[1].1;
            sparse += vals[2].1;
            cont += vals[3].1;
            tape.backward(parts.total)?;
            peak = peak.max(tape.peak_bytes());
            let grads = bound.grads(&tape);
            drop(tape);
            if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
                model.params_mut().set_tensors(snapshot)?;
                return Err(TrainError::Diverged {
                    epoch,
                    step,
                    component: "gradient",
                    value: f64::NAN,
                });
            }
            let scope = step_scope(model, &sb.aspects);
            let mut params = model.params().tensors().to_vec();
            opt.step(&mut params, &grads, &scope);
            model.params_mut().set_tensors(params)?;
        }
        let wall_ms = clock.now_ms() - start;
        let steps = schedule.len();
        let n = steps.max(1) as f64;
        let (val_acc, val_sparsity) = match val {
            Some(v) if !v.is_empty() => {
                let preds = eval::predict(model, v, cfg.eval_batch_size)?;
                let report = eval::score(
                    &preds,
                    v,
                    eval::Aggregation::Micro,
                    eval::RunMetadata {
                        seed: cfg.seed,
                        config_hash: String::new(),
                        mode: String::new(),
                    },
                )?;
                (
                    report.aspects.iter().map(|a| a.accuracy).collect(),
                    report.aspects.iter().map(|a| Some(a.sparsity)).collect(),
                )
            }
            _ => (vec![None; k], vec![None; k]),
        };
        let m = EpochMetrics {
            epoch,
            mode: cfg.mode,
            steps,
            loss: loss / n,
            ce: ce / n,
            sparse: sparse / n,
            cont: cont / n,
            val_acc,
            val_sparsity,
            mask_computations,
            wall_ms,
            peak_live_bytes: peak,
        };
        on_epoch(&m);
        epochs.push(m);
    }
    Ok(TrainOutcome { epochs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::EncodedExample;
    use crate::model::MareConfig;

    fn mask(tape: &mut Tape, rows: &[&[f64]]) -> Var {
        let len = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        tape.constant(Tensor::new(vec![1, rows.len(), len], data).unwrap())
    }

    fn value(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn sparsity_examples() {
        let mut tape = Tape::new();
        let mut row = [0.0; 10];
        row[..3].fill(1.0);
        let m = mask(&mut tape, &[&row]);
        let l = sparsity_loss(&mut tape, m, &[0.2]).unwrap();
        assert!((value(&tape, l) - 0.1).abs() < 1e-12);
        let mut other = [0.0; 10];
        other[..5].fill(1.0);
        let m = mask(&mut tape, &[&row, &other]);
        let l = sparsity_loss(&mut tape, m, &[0.2, 0.2]).unwrap();
        assert!((value(&tape, l) - 0.2).abs() < 1e-12);
        assert!(sparsity_loss(&mut tape, m, &[0.2]).is_err());
    }

    #[test]
    fn continuity_examples() {
        let mut tape = Tape::new();
        let m = mask(&mut tape, &[&[1.0, 1.0, 0.0, 0.0, 1.0]]);
        let l = continuity_loss(&mut tape, m).unwrap();
        assert!((value(&tape, l) - 0.5).abs() < 1e-12);
        let m = mask(&mut tape, &[&[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]]);
        let l = continuity_loss(&mut tape, m).unwrap();
        assert!((value(&tape, l) - 1.0).abs() < 1e-12);
        let m = mask(&mut tape, &[&[1.0, 1.0, 1.0]]);
        let l = continuity_loss(&mut tape, m).unwrap();
        assert_eq!(value(&tape, l), 0.0);
        let m = mask(&mut tape, &[&[1.0]]);
        assert!(continuity_loss(&mut tape, m).is_err());
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::new();
        let ce = tape.constant(Tensor::scalar(1.0));
        let s = tape.constant(Tensor::scalar(0.5));
        let c = tape.constant(Tensor::scalar(0.25));
        let t = total_loss(&mut tape, ce, s, c, LossWeights { beta: 2.0, gamma: 4.0 }).unwrap();
        assert_eq!(value(&tape, t), 3.0);
        assert!(LossWeights { beta: -1.0, gamma: 0.0 }.validate().is_err());
        assert!(LossWeights { beta: f64::NAN, gamma: 0.0 }.validate().is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[3, 5]));
        let ce = cross_entropy(&mut tape, l, &[Some(0), Some(4), Some(2)]).unwrap();
        assert!((value(&tape, ce) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn round_robin_equal_streams() {
        let mut rng = RngState::new(0);
        let s = vec![vec!['a', 'b'], vec!['c', 'd'], vec!['e', 'f']];
        let out = balanced_round_robin(&s, &mut rng).unwrap();
        let aspects: Vec<usize> = out.iter().map(|(a, _)| *a).collect();
        assert_eq!(aspects, vec![0, 1, 2, 0, 1, 2]);
        let items: Vec<char> = out.iter().map(|(_, c)| *c).collect();
        assert_eq!(items, vec!['a', 'c', 'e', 'b', 'd', 'f']);
    }

    #[test]
    fn round_robin_recycles_short_streams() {
        let mut rng = RngState::new(1);
        let s = vec![vec![0, 1, 2, 3, 4], vec![10, 11]];
        let out = balanced_round_robin(&s, &mut rng).unwrap();
        assert_eq!(out.len(), 10);
        let counts = [0, 1].map(|j| out.iter().filter(|(a, _)| *a == j).count());
        assert_eq!(counts, [5, 5]);
        let second: Vec<i32> = out.iter().filter(|(a, _)| *a == 1).map(|(_, x)| *x).collect();
        assert_eq!(&second[..2], &[10, 11]);
        let mut cycle = second[2..4].to_vec();
        cycle.sort();
        assert_eq!(cycle, vec![10, 11]);
        assert!(matches!(
            balanced_round_robin(&[vec![1], vec![]], &mut rng),
            Err(TrainError::EmptyStream(1))
        ));
    }

    #[test]
    fn assignment_balances_labelled_aspects() {
        let ex = |labels: Vec<Option<usize>>| EncodedExample {
            ids: vec![1, 2],
            labels,
            gold: vec![None, None],
        };
        let data = EncodedDataset {
            num_aspects: 2,
            examples: vec![
                ex(vec![Some(0), Some(1)]),
                ex(vec![Some(1), Some(0)]),
                ex(vec![None, Some(1)]),
                ex(vec![Some(0), None]),
            ],
        };
        let s = assign_aspects(&data, &[0, 1, 2, 3]);
        assert_eq!(s, vec![vec![0, 3], vec![1, 2]]);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut params = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), Tensor::scalar(5.0)];
        let grads = vec![Tensor::new(vec![2], vec![3.0, -0.5]).unwrap(), Tensor::scalar(1.0)];
        let mut opt = AdamW::new(&params, &cfg);
        opt.step(&mut params, &grads, &[true, false]);
        assert!((params[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((params[0].data()[1] + 0.9).abs() < 1e-6);
        assert_eq!(params[1].data()[0], 5.0);
    }

    fn toy_data(n: usize, seed: u64) -> EncodedDataset {
        // Token 1 at any position means class 1 for aspect 0; token 2 for aspect 1.
        let mut rng = RngState::new(seed);
        let examples = (0..n)
            .map(|_| {
                let mut ids: Vec<usize> = (0..6).map(|_| 3 + rng.below(5)).collect();
                let mut labels = vec![Some(0), Some(0)];
                for (a, tok) in [(0, 1), (1, 2)] {
                    if rng.bernoulli(0.5) {
                        ids[rng.below(6)] = tok;
                        labels[a] = Some(1);
                    }
                }
                for (a, tok) in [(0, 1), (1, 2)] {
                    labels[a] = Some(usize::from(ids.contains(&tok)));
                }
                EncodedExample {
                    ids,
                    labels,
                    gold: vec![None, None],
                }
            })
            .collect();
        EncodedDataset {
            num_aspects: 2,
            examples,
        }
    }

    fn toy_model() -> Mare {
        let mut cfg = MareConfig::toy(8, 6, 2);
        cfg.encoder.num_layers = 2;
        cfg.encoder.model_dim = 16;
        cfg.encoder.num_heads = 2;
        cfg.encoder.ffn_dim = 32;
        cfg.cliff_layer = 2;
        Mare::new(cfg, 3).unwrap()
    }

    #[test]
    fn learns_a_separable_toy_task() {
        let train_set = toy_data(400, 1);
        let val = toy_data(200, 2);
        let mut model = toy_model();
        let cfg = TrainConfig {
            max_epochs: 12,
            mode: TrainMode::Collaborative,
            loss_weights: LossWeights { beta: 0.0, gamma: 0.0 },
            ..TrainConfig::default()
        };
        let out = train(&mut model, &train_set, Some(&val), &cfg, &NoClock, &mut |_| {}).unwrap();
        let last = out.epochs.last().unwrap();
        for acc in &last.val_acc {
            assert!(acc.unwrap() >= 0.99, "{:?}", last.val_acc);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(64, 5);
        let run = |mode| {
            let mut model = toy_model();
            let cfg = TrainConfig {
                max_epochs: 2,
                batch_size: 16,
                mode,
                seed: 7,
                ..TrainConfig::default()
            };
            let out = train(&mut model, &data, Some(&data), &cfg, &NoClock, &mut |_| {}).unwrap();
            (out.epochs, model.params().tensors().to_vec())
        };
        for mode in [TrainMode::Multitask, TrainMode::Collaborative] {
            let (a, pa) = run(mode);
            let (b, pb) = run(mode);
            assert_eq!(a, b);
            assert_eq!(pa, pb);
        }
    }

    #[test]
    fn multitask_steps_touch_only_the_active_aspect() {
        let model = toy_model();
        let scope = step_scope(&model, &[1]);
        for id in model.aspect_param_ids(0) {
            assert!(!scope[id.index()]);
        }
        for id in model.aspect_param_ids(1) {
            assert!(scope[id.index()]);
        }
    }

    #[test]
    fn multitask_schedule_alternates_aspects() {
        let data = toy_data(40, 2);
        let mut rng = RngState::new(0);
        let s = epoch_schedule(&data, TrainMode::Multitask, 4, &mut rng).unwrap();
        for (i, b) in s.iter().enumerate() {
            assert_eq!(b.aspects, vec![i % 2]);
        }
        let c = epoch_schedule(&data, TrainMode::Collaborative, 4, &mut rng).unwrap();
        assert_eq!(c.len(), 10);
        assert!(c.iter().all(|b| b.aspects == vec![0, 1]));
    }

    #[test]
    fn rejects_bad_configs() {
        let data = toy_data(8, 0);
        let mut model = toy_model();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&mut model, &data, None, &cfg, &NoClock, &mut |_| {}),
            Err(TrainError::Config(_))
        ));
        let empty = EncodedDataset {
            num_aspects: 2,
            examples: vec![],
        };
        assert!(matches!(
            train(&mut model, &empty, None, &TrainConfig::default(), &NoClock, &mut |_| {}),
            Err(TrainError::EmptyData)
        ));
    }

    #[test]
    fn divergence_restores_parameters() {
        let data = toy_data(16, 0);
        let cfg = TrainConfig {
            loss_weights: LossWeights { beta: f64::MAX, gamma: f64::MAX },
            ..TrainConfig::default()
        };
        let mut model = toy_model();
        let err = train(&mut model, &data, None, &cfg, &NoClock, &mut |_| {}).unwrap_err();
        let TrainError::Diverged { epoch, .. } = err else {
            panic!("{err:?}");
        };
        let mut reference = toy_model();
        let done = TrainConfig {
            max_epochs: epoch - 1,
            ..cfg
        };
        train(&mut reference, &data, None, &done, &NoClock, &mut |_| {}).unwrap();
        assert_eq!(model.params().tensors(), reference.params().tensors());
    }
}
