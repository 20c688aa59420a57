//! Pre-norm transformer encoder whose attention takes an external
//! multiplicative mask.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, RngState, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    /// Longest sequence including the prepended special tokens.
    pub max_len: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: 4 layers, 4 heads, width 64.
    pub fn toy(vocab_size: usize, max_len: usize) -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            vocab_size,
            max_len,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(EncoderError::Config(format!("{name} must be positive")));
            }
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(EncoderError::Config(format!(
                "model_dim {} is not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(alloc::string::String),
    #[error("token id {token_id} outside vocabulary of size {vocab_size}")]
    Vocabulary { token_id: usize, vocab_size: usize },
    #[error("sequence of {len} positions exceeds max_len {max_len}")]
    Length { len: usize, max_len: usize },
    #[error("batch rows must share one length, found {first} and {other}")]
    RaggedBatch { first: usize, other: usize },
    #[error("attention mask covers {mask} positions but the sequence has {seq}")]
    MaskDims { mask: usize, seq: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerParams {
    pub ln1_gamma: ParamId,
    pub ln1_beta: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub ln2_gamma: ParamId,
    pub ln2_beta: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderParams {
    pub tokens: ParamId,
    pub positions: ParamId,
    pub layers: Vec<LayerParams>,
    pub final_gamma: ParamId,
    pub final_beta: ParamId,
}

impl EncoderParams {
    /// Registers freshly initialised encoder weights in `store`.
    ///
    /// Embeddings draw from N(0, `embed_std`²); projections from
    /// N(0, 1/fan_in); biases start at zero and layer-norm gains at one.
    pub fn init(cfg: &EncoderConfig, store: &mut ParamStore, embed_std: f64, rng: &mut RngState) -> Self {
        let d = cfg.model_dim;
        let f = cfg.ffn_dim;
        let proj_std = 1.0 / libm::sqrt(d as f64);
        let tokens = store.add_normal("embed.tokens", &[cfg.vocab_size, d], embed_std, rng);
        let positions = store.add_normal("embed.positions", &[cfg.max_len, d], embed_std, rng);
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = |s: &str| format!("layers.{i}.{s}");
            layers.push(LayerParams {
                ln1_gamma: store.add(p("ln1.gamma"), Tensor::ones(&[d])),
                ln1_beta: store.add(p("ln1.beta"), Tensor::zeros(&[d])),
                wq: store.add_normal(p("attn.wq"), &[d, d], proj_std, rng),
                bq: store.add(p("attn.bq"), Tensor::zeros(&[d])),
                wk: store.add_normal(p("attn.wk"), &[d, d], proj_std, rng),
                bk: store.add(p("attn.bk"), Tensor::zeros(&[d])),
                wv: store.add_normal(p("attn.wv"), &[d, d], proj_std, rng),
                bv: store.add(p("attn.bv"), Tensor::zeros(&[d])),
                wo: store.add_normal(p("attn.wo"), &[d, d], proj_std, rng),
                ln2_gamma: store.add(p("ln2.gamma"), Tensor::ones(&[d])),
                ln2_beta: store.add(p("ln2.beta"), Tensor::zeros(&[d])),
                w1: store.add_normal(p("ffn.w1"), &[d, f], proj_std, rng),
                b1: store.add(p("ffn.b1"), Tensor::zeros(&[f])),
                w2: store.add_normal(p("ffn.w2"), &[f, d], 1.0 / libm::sqrt(f as f64), rng),
                b2: store.add(p("ffn.b2"), Tensor::zeros(&[d])),
            });
        }
        Self {
            tokens,
            positions,
            layers,
            final_gamma: store.add("final_ln.gamma", Tensor::ones(&[d])),
            final_beta: store.add("final_ln.beta", Tensor::zeros(&[d])),
        }
    }
}

/// Encoder activations `[batch, k + L, d]` after `layer_index` layers.
#[derive(Debug, Clone, Copy)]
pub struct HiddenStates {
    pub states: Var,
    pub layer_index: usize,
}

/// Attention gate shared by every head of one layer.
///
/// `mask` is what multiplies the attention weights: its forward value is the
/// binary `binary` matrix and its gradient flows into `carrier`.
#[derive(Debug, Clone)]
pub struct AttentionMaskMatrix {
    pub mask: Var,
    pub binary: Tensor,
    pub carrier: Var,
}

/// Embeds a batch of equal-length token sequences and prepends the special
/// token table, giving rows `0..k` = special tokens, `k..` = token +
/// position embeddings.
pub fn embed(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    params: &EncoderParams,
    bound: &Bound,
    token_ids: &[Vec<usize>],
    special: Var,
) -> Result<HiddenStates, EncoderError> {
    let sshape = tape.shape(special).to_vec();
    if sshape.len() != 2 || sshape[1] != cfg.model_dim {
        return Err(NumericsError::ShapeMismatch {
            op: "embed",
            left: sshape,
            right: alloc::vec![cfg.model_dim],
        }
        .into());
    }
    let k = sshape[0];
    let b = token_ids.len();
    let len = token_ids.first().map_or(0, Vec::len);
    for row in token_ids {
        if row.len() != len {
            return Err(EncoderError::RaggedBatch {
                first: len,
                other: row.len(),
            });
        }
        if let Some(&bad) = row.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(EncoderError::Vocabulary {
                token_id: bad,
                vocab_size: cfg.vocab_size,
            });
        }
    }
    if len + k > cfg.max_len {
        return Err(EncoderError::Length {
            len: len + k,
            max_len: cfg.max_len,
        });
    }
    let d = cfg.model_dim;
    let flat: Vec<usize> = token_ids.iter().flatten().copied().collect();
    let tok = tape.gather_rows(bound[params.tokens], &flat)?;
    let tok = tape.reshape(tok, &[b, len, d])?;
    let positions: Vec<usize> = (0..len).collect();
    let pos = tape.gather_rows(bound[params.positions], &positions)?;
    let pos = tape.reshape(pos, &[1, len, d])?;
    let pos = tape.expand(pos, &[b, len, d])?;
    let text = tape.add(tok, pos)?;
    let spec = tape.reshape(special, &[1, k, d])?;
    let spec = tape.expand(spec, &[b, k, d])?;
    let states = tape.concat(&[spec, text], 1)?;
    Ok(HiddenStates {
        states,
        layer_index: 0,
    })
}

/// Multi-head self-attention over `x` (`[B, P, d]`, already normalised).
///
/// With a mask, each head's weights are the mask-weighted softmax of the
/// scaled scores, so entries gated to zero contribute nothing and a
/// fully-gated row yields a zero output. Without a mask this is standard
/// attention. The output projection carries no bias.
pub fn masked_multi_head_attention(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    lp: &LayerParams,
    bound: &Bound,
    x: Var,
    mask: Option<&AttentionMaskMatrix>,
) -> Result<Var, EncoderError> {
    let s = tape.shape(x).to_vec();
    let (b, p, d) = (s[0], s[1], s[2]);
    if let Some(m) = mask {
        let ms = tape.shape(m.mask);
        if ms != [b, p, p] {
            return Err(EncoderError::MaskDims {
                mask: ms.get(1).copied().unwrap_or(0),
                seq: p,
            });
        }
    }
    let h = cfg.num_heads;
    let dh = cfg.head_dim();
    let heads = |w: ParamId, bias: ParamId, tape: &mut Tape| -> Result<Var, NumericsError> {
        let y = tape.matmul(x, bound[w])?;
        let y = tape.add_row_bias(y, bound[bias])?;
        let y = tape.reshape(y, &[b, p, h, dh])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let q = heads(lp.wq, lp.bq, tape)?;
    let k = heads(lp.wk, lp.bk, tape)?;
    let v = heads(lp.wv, lp.bv, tape)?;
    let kt = tape.transpose_last2(k)?;
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, 1.0 / libm::sqrt(dh as f64));
    let weights = match mask {
        Some(m) => tape.mask_weighted_softmax(scores, m.mask)?,
        None => tape.softmax_last_dim(scores)?,
    };
    let ctx = tape.matmul(weights, v)?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, p, d])?;
    Ok(tape.matmul(ctx, bound[lp.wo])?)
}

/// One pre-norm layer: `h + MHA(LN(h))`, then `+ FFN(LN(.))`.
pub fn encoder_layer(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    lp: &LayerParams,
    bound: &Bound,
    h: HiddenStates,
    mask: Option<&AttentionMaskMatrix>,
) -> Result<HiddenStates, EncoderError> {
    if h.layer_index >= cfg.num_layers {
        return Err(EncoderError::Config(format!(
            "layer index {} beyond num_layers {}",
            h.layer_index, cfg.num_layers
        )));
    }
    let x = tape.layer_norm(h.states, bound[lp.ln1_gamma], bound[lp.ln1_beta])?;
    let attn = masked_multi_head_attention(tape, cfg, lp, bound, x, mask)?;
    let h1 = tape.add(h.states, attn)?;
    let y = tape.layer_norm(h1, bound[lp.ln2_gamma], bound[lp.ln2_beta])?;
    let y = tape.matmul(y, bound[lp.w1])?;
    let y = tape.add_row_bias(y, bound[lp.b1])?;
    let y = tape.gelu(y);
    let y = tape.matmul(y, bound[lp.w2])?;
    let y = tape.add_row_bias(y, bound[lp.b2])?;
    let states = tape.add(h1, y)?;
    Ok(HiddenStates {
        states,
        layer_index: h.layer_index + 1,
    })
}
