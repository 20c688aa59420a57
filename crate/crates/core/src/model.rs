//! The full model: embedder, encoder layers, aspect controller with the
//! cliff schedule, and one classification head per aspect.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AttentionMaskMatrix, EncoderConfig, EncoderError, EncoderParams, HiddenStates};
use crate::mac::{self, AspectProjections, DeletionRule, MacError, MaskSampling, TokenMask};
use crate::numerics::{NumericsError, RngState, Stream, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

/// How the per-aspect special tokens are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitStrategy {
    /// Row 0 is the base classification embedding, the rest are fresh draws.
    Random,
    /// Every row starts as a copy of the base embedding; rows train independently.
    Cls,
    /// One trainable row shared by every aspect.
    Share,
}

impl FromStr for InitStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "random" => Ok(Self::Random),
            "cls" => Ok(Self::Cls),
            "share" => Ok(Self::Share),
            other => Err(format!("unknown init strategy `{other}` (expected random, cls or share)")),
        }
    }
}

impl FromStr for DeletionRule {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hard" => Ok(Self::Hard),
            "amd" => Ok(Self::Amd),
            other => Err(format!("unknown deletion rule `{other}` (expected hard or amd)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MareConfig {
    pub encoder: EncoderConfig,
    pub num_aspects: usize,
    pub num_classes: usize,
    /// First layer (1-based) at which the controller's masks apply.
    pub cliff_layer: usize,
    /// Per-aspect target fraction of kept tokens.
    pub sparsity_targets: Vec<f64>,
    pub init_strategy: InitStrategy,
    pub gumbel_temperature: f64,
    pub deletion: DeletionRule,
    /// Recompute masks at every layer past the cliff (otherwise reuse the
    /// cliff layer's masks).
    pub recompute_masks: bool,
    pub embed_std: f64,
    /// Initial value of each aspect's keep-logit offset.
    pub keep_bias_init: f64,
}

impl MareConfig {
    /// Desk-scale defaults for `num_aspects` aspects and binary labels.
    pub fn toy(vocab_size: usize, max_text_len: usize, num_aspects: usize) -> Self {
        let encoder = EncoderConfig::toy(vocab_size, max_text_len + num_aspects);
        let cliff_layer = encoder.num_layers.saturating_sub(1).max(1);
        Self {
            encoder,
            num_aspects,
            num_classes: 2,
            cliff_layer,
            sparsity_targets: vec![0.1; num_aspects],
            init_strategy: InitStrategy::Random,
            gumbel_temperature: 1.0,
            deletion: DeletionRule::Hard,
            recompute_masks: true,
            embed_std: 1.0,
            keep_bias_init: 2.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        let bad = |msg: String| Err(ModelError::Config(msg));
        if self.num_aspects == 0 {
            return bad("num_aspects must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.cliff_layer == 0 || self.cliff_layer > self.encoder.num_layers {
            return bad(format!(
                "cliff_layer {} outside 1..={}",
                self.cliff_layer, self.encoder.num_layers
            ));
        }
        if self.sparsity_targets.len() != self.num_aspects {
            return bad(format!(
                "{} sparsity targets for {} aspects",
                self.sparsity_targets.len(),
                self.num_aspects
            ));
        }
        if let Some(t) = self.sparsity_targets.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return bad(format!("sparsity target {t} outside [0, 1]"));
        }
        if !(self.gumbel_temperature > 0.0) || !self.gumbel_temperature.is_finite() {
            return bad(format!("gumbel_temperature must be positive, got {}", self.gumbel_temperature));
        }
        if self.encoder.max_len <= self.num_aspects {
            return bad(format!(
                "max_len {} leaves no room for text after {} special tokens",
                self.encoder.max_len, self.num_aspects
            ));
        }
        if !(self.embed_std >= 0.0) || !self.keep_bias_init.is_finite() {
            return bad("embed_std and keep_bias_init must be finite".into());
        }
        Ok(())
    }

    pub fn max_text_len(&self) -> usize {
        self.encoder.max_len - self.num_aspects
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("aspect {aspect} out of range for {num_aspects} aspects")]
    AspectOutOfRange { aspect: usize, num_aspects: usize },
    #[error("aspect {0} listed twice")]
    DuplicateAspect(usize),
    #[error("checkpoint does not match the model layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Mac(#[from] MacError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Whether the controller's mask applies at `layer_index` (1-based).
pub fn cliff_active(layer_index: usize, cliff_layer: usize) -> bool {
    layer_index >= cliff_layer
}

/// Initial special-token table.
///
/// Returns `[k, d]` for `random` and `cls`, and the single shared `[1, d]`
/// row for `share`. The base classification embedding is the first draw
/// from `rng`.
pub fn init_special_tokens(strategy: InitStrategy, num_aspects: usize, dim: usize, std: f64, rng: &mut RngState) -> Tensor {
    let base = rng.normal_vec(dim, std);
    let rows = match strategy {
        InitStrategy::Share => 1,
        _ => num_aspects,
    };
    let mut data = Vec::with_capacity(rows * dim);
    data.extend_from_slice(&base);
    for _ in 1..rows {
        match strategy {
            InitStrategy::Random => data.extend(rng.normal_vec(dim, std)),
            _ => data.extend_from_slice(&base),
        }
    }
    Tensor::new(vec![rows, dim], data).expect("rows * dim values")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelLayout {
    pub encoder: EncoderParams,
    pub special: ParamId,
    pub mac: AspectProjections,
    pub heads: Vec<HeadParams>,
}

/// Replacement of selected rows of one layer's input, for perturbation probes.
#[derive(Debug, Clone)]
pub struct Perturbation {
    /// 1-based layer whose input is perturbed.
    pub layer: usize,
    /// Sequence positions (special tokens first) to overwrite.
    pub positions: Vec<usize>,
    /// `[positions.len(), d]` replacement rows, applied to every batch row.
    pub values: Tensor,
}

pub struct ForwardOptions<'a> {
    pub sampling: MaskSampling<'a>,
    /// Fixed `[B, k', L]` keep masks, one per masked layer, bypassing the
    /// controller.
    pub mask_override: Option<&'a [Tensor]>,
    pub perturb: Option<&'a Perturbation>,
}

impl<'a> ForwardOptions<'a> {
    pub fn sampled(rng: &'a mut RngState) -> Self {
        Self {
            sampling: MaskSampling::Gumbel(rng),
            mask_override: None,
            perturb: None,
        }
    }

    pub fn argmax() -> Self {
        Self {
            sampling: MaskSampling::Argmax,
            mask_override: None,
            perturb: None,
        }
    }
}

/// Masks in force at one layer.
#[derive(Debug, Clone)]
pub struct LayerMasks {
    pub layer: usize,
    pub token_mask: TokenMask,
    pub attention: AttentionMaskMatrix,
}

#[derive(Debug, Clone)]
pub struct MareOutput {
    /// `[B, k', C]`; row `r` is aspect `aspects[r]`.
    pub logits: Var,
    pub aspects: Vec<usize>,
    /// Keep masks of the last layer: the extracted rationales.
    pub final_masks: TokenMask,
    pub layer_masks: Vec<LayerMasks>,
    /// Encoder states; index `l` is the output of layer `l` (0 = embeddings).
    pub hidden: Vec<Var>,
    /// Number of per-aspect controller evaluations performed.
    pub mask_computations: usize,
}

/// A full model instance: configuration, parameters and their layout.
#[derive(Debug, Clone)]
pub struct Mare {
    config: MareConfig,
    params: ParamStore,
    layout: ModelLayout,
}

impl Mare {
    /// Fresh model; all weights come from the `Init` stream of `seed`.
    pub fn new(config: MareConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = RngState::stream(seed, Stream::Init);
        let mut params = ParamStore::new();
        let d = config.encoder.model_dim;
        let encoder = EncoderParams::init(&config.encoder, &mut params, config.embed_std, &mut rng);
        let table = init_special_tokens(config.init_strategy, config.num_aspects, d, config.embed_std, &mut rng);
        let special = params.add("special_tokens", table);
        let mac = AspectProjections::init(config.num_aspects, d, config.keep_bias_init, &mut params, &mut rng);
        let head_std = 1.0 / libm::sqrt(d as f64);
        let heads = (0..config.num_aspects)
            .map(|j| HeadParams {
                weight: params.add_normal(format!("head.{j}.weight"), &[d, config.num_classes], head_std, &mut rng),
                bias: params.add(format!("head.{j}.bias"), Tensor::zeros(&[config.num_classes])),
            })
            .collect();
        Ok(Self {
            config,
            params,
            layout: ModelLayout {
                encoder,
                special,
                mac,
                heads,
            },
        })
    }

    /// Rebuilds a model from a configuration and previously saved parameters.
    pub fn from_parts(config: MareConfig, params: ParamStore) -> Result<Self, ModelError> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.params.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for ((_, want_name, want), (_, name, got)) in model.params.iter().zip(params.iter()) {
            if want_name != name || want.shape() != got.shape() {
                return Err(ModelError::Layout(format!(
                    "expected `{want_name}` {:?}, found `{name}` {:?}",
                    want.shape(),
                    got.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &MareConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn layout(&self) -> &ModelLayout {
        &self.layout
    }

    pub fn bind(&self, tape: &mut Tape) -> Bound {
        self.params.bind(tape)
    }

    /// Special-token table `[k, d]` as used by the forward pass.
    pub fn special_table(&self, tape: &mut Tape, bound: &Bound) -> Result<Var, NumericsError> {
        let v = bound[self.layout.special];
        if self.config.init_strategy == InitStrategy::Share {
            tape.expand(v, &[self.config.num_aspects, self.config.encoder.model_dim])
        } else {
            Ok(v)
        }
    }

    /// Parameters the aspect-`j` path may touch exclusively.
    pub fn aspect_param_ids(&self, j: usize) -> Vec<ParamId> {
        let p = &self.layout.mac.aspects[j];
        let h = &self.layout.heads[j];
        vec![p.query_w, p.query_b, p.key_w, p.key_b, p.keep_bias, h.weight, h.bias]
    }

    fn check_active(&self, active: &[usize]) -> Result<(), ModelError> {
        if active.is_empty() {
            return Err(MacError::NoActiveAspects.into());
        }
        for (i, &a) in active.iter().enumerate() {
            if a >= self.config.num_aspects {
                return Err(ModelError::AspectOutOfRange {
                    aspect: a,
                    num_aspects: self.config.num_aspects,
                });
            }
            if active[..i].contains(&a) {
                return Err(ModelError::DuplicateAspect(a));
            }
        }
        Ok(())
    }

    /// One encoder pass producing logits and masks for the `active` aspects.
    ///
    /// All `k` special tokens are always present. Below the cliff layer no
    /// mask is applied. From the cliff layer on, only the active aspects'
    /// masks are computed; the special tokens of inactive aspects belong to
    /// no active aspect and are therefore deleted there.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[Vec<usize>],
        active: &[usize],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<MareOutput, ModelError> {
        self.check_active(active)?;
        let cfg = &self.config;
        let k = cfg.num_aspects;
        let special = self.special_table(tape, bound)?;
        let mut h = encoder::embed(tape, &cfg.encoder, &self.layout.encoder, bound, batch, special)?;
        let mut hidden = vec![h.states];
        let mut layer_masks: Vec<LayerMasks> = Vec::new();
        let mut mask_computations = 0;
        let mut masked_layer = 0;
        for (li, lp) in self.layout.encoder.layers.iter().enumerate() {
            let layer = li + 1;
            if let Some(p) = opts.perturb.filter(|p| p.layer == layer) {
                h = self.perturbed(tape, h, p)?;
            }
            let masks = if cliff_active(layer, cfg.cliff_layer) {
                let reuse = !cfg.recompute_masks && opts.mask_override.is_none();
                let token_mask = match (opts.mask_override, layer_masks.last()) {
                    (Some(over), _) => {
                        let t = over.get(masked_layer).ok_or(ModelError::Config(format!(
                            "mask override has no entry for masked layer {masked_layer}"
                        )))?;
                        let keep = tape.constant(t.clone());
                        TokenMask {
                            keep,
                            aspects: active.to_vec(),
                        }
                    }
                    (None, Some(prev)) if reuse => prev.token_mask.clone(),
                    _ => {
                        let scores = mac::compute_aspect_scores(tape, &self.layout.mac, bound, &h, active)?;
                        mask_computations += active.len();
                        mac::sample_token_mask(tape, &scores, cfg.gumbel_temperature, &mut opts.sampling)?
                    }
                };
                let attention = mac::attention_mask(tape, cfg.deletion, &token_mask, k)?;
                masked_layer += 1;
                layer_masks.push(LayerMasks {
                    layer,
                    token_mask,
                    attention,
                });
                layer_masks.last().map(|m| &m.attention)
            } else {
                None
            };
            h = encoder::encoder_layer(tape, &cfg.encoder, lp, bound, h, masks)?;
            hidden.push(h.states);
        }
        let enc = &self.layout.encoder;
        let fin = tape.layer_norm(h.states, bound[enc.final_gamma], bound[enc.final_beta])?;
        let b = batch.len();
        let d = cfg.encoder.model_dim;
        let mut rows = Vec::with_capacity(active.len());
        for &j in active {
            let head = &self.layout.heads[j];
            let s = tape.narrow(fin, 1, j, 1)?;
            let s = tape.reshape(s, &[b, d])?;
            let y = tape.matmul(s, bound[head.weight])?;
            let y = tape.add_row_bias(y, bound[head.bias])?;
            rows.push(tape.reshape(y, &[b, 1, cfg.num_classes])?);
        }
        let logits = if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 1)? };
        let final_masks = layer_masks
            .last()
            .map(|m| m.token_mask.clone())
            .expect("cliff layer is within the stack");
        Ok(MareOutput {
            logits,
            aspects: active.to_vec(),
            final_masks,
            layer_masks,
            hidden,
            mask_computations,
        })
    }

    /// All `k` aspects in one pass.
    pub fn forward_collaborative(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[Vec<usize>],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<MareOutput, ModelError> {
        let all: Vec<usize> = (0..self.config.num_aspects).collect();
        self.forward(tape, bound, batch, &all, opts)
    }

    /// Aspect `j` only: one controller evaluation per masked layer and one head.
    pub fn forward_multitask(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        batch: &[Vec<usize>],
        aspect: usize,
        opts: &mut ForwardOptions<'_>,
    ) -> Result<MareOutput, ModelError> {
        self.forward(tape, bound, batch, &[aspect], opts)
    }

    fn perturbed(&self, tape: &mut Tape, h: HiddenStates, p: &Perturbation) -> Result<HiddenStates, ModelError> {
        let mut value = tape.value(h.states).clone();
        let s = value.shape().to_vec();
        let (b, rows, d) = (s[0], s[1], s[2]);
        if p.values.shape() != [p.positions.len(), d] {
            return Err(NumericsError::ShapeMismatch {
                op: "perturb",
                left: p.values.shape().to_vec(),
                right: vec![p.positions.len(), d],
            }
            .into());
        }
        for bi in 0..b {
            for (r, &pos) in p.positions.iter().enumerate() {
                if pos >= rows {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "perturb",
                        index: pos,
                        bound: rows,
                    }
                    .into());
                }
                let dst = (bi * rows + pos) * d;
                value.data_mut()[dst..dst + d].copy_from_slice(&p.values.data()[r * d..(r + 1) * d]);
            }
        }
        Ok(HiddenStates {
            states: tape.constant(value),
            layer_index: h.layer_index,
        })
    }

    /// Noise-free forward without gradient bookkeeping beyond the tape.
    pub fn infer(&self, batch: &[Vec<usize>], active: &[usize]) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = self.forward(&mut tape, &bound, batch, active, &mut ForwardOptions::argmax())?;
        Ok(Inference {
            logits: tape.value(out.logits).clone(),
            final_masks: tape.value(out.final_masks.keep).clone(),
            layer_masks: out
                .layer_masks
                .iter()
                .map(|m| tape.value(m.token_mask.keep).clone())
                .collect(),
            aspects: out.aspects,
            mask_computations: out.mask_computations,
        })
    }
}

/// Plain values from [`Mare::infer`].
#[derive(Debug, Clone)]
pub struct Inference {
    /// `[B, k', C]`.
    pub logits: Tensor,
    /// `[B, k', L]`.
    pub final_masks: Tensor,
    pub layer_masks: Vec<Tensor>,
    pub aspects: Vec<usize>,
    pub mask_computations: usize,
}

impl Inference {
    /// Argmax class per (example, active aspect row).
    pub fn predictions(&self) -> Vec<Vec<usize>> {
        let s = self.logits.shape();
        let (b, rows, c) = (s[0], s[1], s[2]);
        let v = self.logits.data();
        (0..b)
            .map(|bi| {
                (0..rows)
                    .map(|r| {
                        let row = &v[(bi * rows + r) * c..][..c];
                        let mut best = 0;
                        for j in 1..c {
                            if row[j] > row[best] {
                                best = j;
                            }
                        }
                        best
                    })
                    .collect()
            })
            .collect()
    }
}

/// One aspect's extracted rationale for one example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rationale {
    pub aspect: usize,
    pub selected: Vec<u8>,
    /// Inclusive `(start, end)` token ranges of consecutive selections.
    pub spans: Vec<(usize, usize)>,
}

/// Final-layer keep masks turned into per-example, per-aspect rationales.
/// `masks` is `[B, k', L]`; row `r` belongs to `aspects[r]`.
pub fn extract_rationales(masks: &Tensor, aspects: &[usize]) -> Vec<Vec<Rationale>> {
    let s = masks.shape();
    let (b, rows, len) = (s[0], s[1], s[2]);
    let v = masks.data();
    (0..b)
        .map(|bi| {
            (0..rows)
                .map(|r| {
                    let selected: Vec<u8> = v[(bi * rows + r) * len..][..len]
                        .iter()
                        .map(|&x| u8::from(x != 0.0))
                        .collect();
                    Rationale {
                        aspect: aspects[r],
                        spans: mask_spans(&selected),
                        selected,
                    }
                })
                .collect()
        })
        .collect()
}

/// Maximal runs of ones as inclusive ranges.
pub fn mask_spans(mask: &[u8]) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, &m) in mask.iter().enumerate() {
        match (m != 0, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, mask.len() - 1));
    }
    spans
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(k: usize, layers: usize, cliff: usize) -> MareConfig {
        let mut cfg = MareConfig::toy(12, 6, k);
        cfg.encoder.num_layers = layers;
        cfg.encoder.model_dim = 8;
        cfg.encoder.num_heads = 2;
        cfg.encoder.ffn_dim = 16;
        cfg.cliff_layer = cliff;
        cfg
    }

    fn batch() -> Vec<Vec<usize>> {
        vec![vec![1, 2, 3, 4, 5, 6], vec![6, 5, 4, 3, 2, 1]]
    }

    #[test]
    fn cliff_schedule() {
        let active: Vec<usize> = (1..=4).filter(|&l| cliff_active(l, 3)).collect();
        assert_eq!(active, vec![3, 4]);
        assert!(!cliff_active(2, 3));
        assert_eq!(MareConfig::toy(10, 5, 2).cliff_layer, 3);
    }

    #[test]
    fn rejects_cliff_outside_stack() {
        assert!(matches!(Mare::new(tiny(2, 3, 0), 1), Err(ModelError::Config(_))));
        assert!(matches!(Mare::new(tiny(2, 3, 4), 1), Err(ModelError::Config(_))));
        assert!(Mare::new(tiny(2, 3, 3), 1).is_ok());
    }

    #[test]
    fn mask_computation_counter() {
        for (k, n, x) in [(3, 4, 3), (2, 4, 1), (3, 3, 3)] {
            let m = Mare::new(tiny(k, n, x), 1).unwrap();
            let all: Vec<usize> = (0..k).collect();
            let inf = m.infer(&batch(), &all).unwrap();
            assert_eq!(inf.mask_computations, k * (n - x + 1));
            assert_eq!(inf.layer_masks.len(), n - x + 1);
        }
        let mut cfg = tiny(3, 4, 2);
        cfg.recompute_masks = false;
        let inf = Mare::new(cfg, 1).unwrap().infer(&batch(), &[0, 1, 2]).unwrap();
        assert_eq!(inf.mask_computations, 3);
        assert!(inf.layer_masks.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn special_token_init_strategies() {
        let mut rng = RngState::new(4);
        let r = init_special_tokens(InitStrategy::Random, 3, 5, 1.0, &mut rng);
        assert_eq!(r.shape(), &[3, 5]);
        assert_ne!(&r.data()[..5], &r.data()[5..10]);
        let mut rng = RngState::new(4);
        let c = init_special_tokens(InitStrategy::Cls, 3, 5, 1.0, &mut rng);
        assert_eq!(&c.data()[..5], &r.data()[..5]);
        assert_eq!(&c.data()[..5], &c.data()[10..]);
        let mut rng = RngState::new(4);
        let s = init_special_tokens(InitStrategy::Share, 3, 5, 1.0, &mut rng);
        assert_eq!(s.shape(), &[1, 5]);

        let mut cfg = tiny(3, 2, 2);
        cfg.init_strategy = InitStrategy::Share;
        let m = Mare::new(cfg, 2).unwrap();
        let mut tape = Tape::new();
        let bound = m.bind(&mut tape);
        let table = m.special_table(&mut tape, &bound).unwrap();
        let v = tape.value(table);
        assert_eq!(v.shape(), &[3, 8]);
        assert_eq!(&v.data()[..8], &v.data()[16..]);
    }

    #[test]
    fn rationale_spans() {
        assert_eq!(mask_spans(&[0, 1, 1, 0, 1]), vec![(1, 2), (4, 4)]);
        assert_eq!(mask_spans(&[0, 0]), vec![]);
        assert_eq!(mask_spans(&[1, 1, 1]), vec![(0, 2)]);
        let masks = Tensor::new(vec![1, 2, 5], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = extract_rationales(&masks, &[2, 0]);
        assert_eq!(r[0][0].aspect, 2);
        assert_eq!(r[0][0].spans, vec![(1, 2), (4, 4)]);
        assert_eq!(r[0][1].selected, vec![1, 0, 0, 0, 0]);
    }

    #[test]
    fn forward_shapes_and_aspect_checks() {
        let m = Mare::new(tiny(3, 2, 1), 3).unwrap();
        let inf = m.infer(&batch(), &[2, 0]).unwrap();
        assert_eq!(inf.logits.shape(), &[2, 2, 2]);
        assert_eq!(inf.final_masks.shape(), &[2, 2, 6]);
        assert_eq!(inf.predictions().len(), 2);
        assert!(matches!(m.infer(&batch(), &[3]), Err(ModelError::AspectOutOfRange { .. })));
        assert!(matches!(m.infer(&batch(), &[1, 1]), Err(ModelError::DuplicateAspect(1))));
        let long = vec![vec![1; 7]];
        assert!(m.infer(&long, &[0]).is_err());
    }

    #[test]
    fn deleted_token_perturbation_leaves_other_aspects_unchanged() {
        let cfg = tiny(2, 3, 1);
        let m = Mare::new(cfg, 5).unwrap();
        let b = vec![vec![1, 2, 3, 4, 5, 6]];
        // Aspect 0 keeps tokens 0..3, aspect 1 keeps 3..6; token 2 is aspect 0's.
        let keep = Tensor::new(
            vec![1, 2, 6],
            vec![1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        let masks = vec![keep.clone(), keep.clone(), keep];
        let run = |perturb: Option<&Perturbation>| {
            let mut tape = Tape::new();
            let bound = m.bind(&mut tape);
            let mut opts = ForwardOptions::argmax();
            opts.mask_override = Some(&masks);
            opts.perturb = perturb;
            let out = m.forward(&mut tape, &bound, &b, &[0, 1], &mut opts).unwrap();
            tape.value(out.logits).clone()
        };
        let base = run(None);
        let p = Perturbation {
            layer: 2,
            positions: vec![2 + 2],
            values: Tensor::filled(&[1, 8], 7.5),
        };
        let moved = run(Some(&p));
        // Aspect 1's logits are bit-identical; aspect 0's change.
        assert_eq!(base.data()[2..4], moved.data()[2..4]);
        assert_ne!(base.data()[..2], moved.data()[..2]);
    }

    #[test]
    fn construction_is_seed_deterministic() {
        let a = Mare::new(tiny(2, 2, 1), 9).unwrap();
        let b = Mare::new(tiny(2, 2, 1), 9).unwrap();
        let c = Mare::new(tiny(2, 2, 1), 10).unwrap();
        assert_eq!(a.params().tensors(), b.params().tensors());
        assert_ne!(a.params().tensors(), c.params().tensors());
        let rebuilt = Mare::from_parts(a.config().clone(), a.params().clone()).unwrap();
        assert_eq!(rebuilt.params().tensors(), a.params().tensors());
        assert!(matches!(
            Mare::from_parts(tiny(3, 2, 1), a.params().clone()),
            Err(ModelError::Layout(_))
        ));
    }
}
