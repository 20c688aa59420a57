//! Multi-aspect controller: per-aspect token selection and the attention
//! masks derived from it.
//!
//! For every active aspect `j` the controller projects the aspect's special
//! token into a query and every text token into a key, scores them by scaled
//! dot product, and turns each score into a keep/delete decision with a hard
//! Gumbel-softmax over the two logits `[score + keep_bias_j, 0]`. The binary
//! keep matrix is then turned into a `[P, P]` attention gate (P = k + L) by
//! either hard deletion (outer product, isolating aspects) or attention mask
//! deletion (column broadcast, used for ablation).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoder::{AttentionMaskMatrix, HiddenStates};
use crate::numerics::{NumericsError, RngState, Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeletionRule {
    /// Outer-product mask: a token only interacts with tokens sharing an aspect.
    Hard,
    /// Column mask: deleted tokens stop being attended to but still attend.
    Amd,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MacError {
    #[error("aspect index {aspect} out of range for {num_aspects} aspects")]
    AspectOutOfRange { aspect: usize, num_aspects: usize },
    #[error("no active aspects")]
    NoActiveAspects,
    #[error("token mask is not binary in the forward pass (found {0})")]
    NonBinaryMask(f64),
    #[error("hidden states have {rows} rows, fewer than {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Query and key maps of one aspect.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectProjection {
    pub query_w: ParamId,
    pub query_b: ParamId,
    pub key_w: ParamId,
    pub key_b: ParamId,
    pub keep_bias: ParamId,
}

/// One query/key map pair per aspect; parameters are disjoint across aspects.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AspectProjections {
    pub aspects: Vec<AspectProjection>,
    pub dim: usize,
}

impl AspectProjections {
    pub fn init(
        num_aspects: usize,
        model_dim: usize,
        keep_bias: f64,
        store: &mut ParamStore,
        rng: &mut RngState,
    ) -> Self {
        let std = 1.0 / libm::sqrt(model_dim as f64);
        let aspects = (0..num_aspects)
            .map(|j| AspectProjection {
                query_w: store.add_normal(format!("mac.{j}.query_w"), &[model_dim, model_dim], std, rng),
                query_b: store.add(format!("mac.{j}.query_b"), Tensor::zeros(&[model_dim])),
                key_w: store.add_normal(format!("mac.{j}.key_w"), &[model_dim, model_dim], std, rng),
                key_b: store.add(format!("mac.{j}.key_b"), Tensor::zeros(&[model_dim])),
                keep_bias: store.add(format!("mac.{j}.keep_bias"), Tensor::new(vec![1], vec![keep_bias]).unwrap()),
            })
            .collect();
        Self {
            aspects,
            dim: model_dim,
        }
    }

    pub fn num_aspects(&self) -> usize {
        self.aspects.len()
    }
}

/// Keep/delete logits `[B, k', L, 2]` for the listed aspects (channel 0 = keep).
#[derive(Debug, Clone)]
pub struct AspectScores {
    pub logits: Var,
    pub aspects: Vec<usize>,
}

/// Binary keep decisions `[B, k', L]`; row `r` belongs to `aspects[r]`.
///
/// The forward value is exactly 0/1 (except on a relaxed tape); gradients
/// reach the controller through the Gumbel-softmax relaxation.
#[derive(Debug, Clone)]
pub struct TokenMask {
    pub keep: Var,
    pub aspects: Vec<usize>,
}

/// How keep/delete decisions are drawn from the logits.
pub enum MaskSampling<'a> {
    /// Fresh Gumbel noise per decision (training).
    Gumbel(&'a mut RngState),
    /// Noise-free argmax: keep iff the keep logit is at least the delete logit.
    Argmax,
}

/// Scaled dot-product scores between each active aspect's special token and
/// every text token.
///
/// `h` holds `num_aspects` special rows followed by the text rows.
pub fn compute_aspect_scores(
    tape: &mut Tape,
    proj: &AspectProjections,
    bound: &Bound,
    h: &HiddenStates,
    active: &[usize],
) -> Result<AspectScores, MacError> {
    let k = proj.num_aspects();
    if active.is_empty() {
        return Err(MacError::NoActiveAspects);
    }
    if let Some(&bad) = active.iter().find(|&&j| j >= k) {
        return Err(MacError::AspectOutOfRange {
            aspect: bad,
            num_aspects: k,
        });
    }
    let s = tape.shape(h.states).to_vec();
    let (b, rows) = (s[0], s[1]);
    if rows < k {
        return Err(MacError::TooFewRows { rows, needed: k });
    }
    let len = rows - k;
    let text = tape.narrow(h.states, 1, k, len)?;
    let zeros = tape.constant(Tensor::zeros(&[b, len, 1]));
    let inv_sqrt = 1.0 / libm::sqrt(proj.dim as f64);
    let mut per_aspect = Vec::with_capacity(active.len());
    for &j in active {
        let p = &proj.aspects[j];
        let special = tape.narrow(h.states, 1, j, 1)?;
        let q = tape.matmul(special, bound[p.query_w])?;
        let q = tape.add_row_bias(q, bound[p.query_b])?;
        let keys = tape.matmul(text, bound[p.key_w])?;
        let keys = tape.add_row_bias(keys, bound[p.key_b])?;
        let qt = tape.transpose_last2(q)?;
        let score = tape.matmul(keys, qt)?;
        let score = tape.scale(score, inv_sqrt);
        let bias = tape.reshape(bound[p.keep_bias], &[1, 1, 1])?;
        let bias = tape.expand(bias, &[b, len, 1])?;
        let keep_logit = tape.add(score, bias)?;
        let logits = tape.concat(&[keep_logit, zeros], 2)?;
        per_aspect.push(tape.reshape(logits, &[b, 1, len, 2])?);
    }
    let logits = if per_aspect.len() == 1 {
        per_aspect[0]
    } else {
        tape.concat(&per_aspect, 1)?
    };
    Ok(AspectScores {
        logits,
        aspects: active.to_vec(),
    })
}

/// Scores for aspect `j` alone: only its query/key maps are evaluated.
pub fn multi_task_projection(
    tape: &mut Tape,
    proj: &AspectProjections,
    bound: &Bound,
    h: &HiddenStates,
    aspect: usize,
) -> Result<AspectScores, MacError> {
    compute_aspect_scores(tape, proj, bound, h, &[aspect])
}

/// Binary keep decision per (aspect, token) via hard Gumbel-softmax over the
/// two logits. Aspects decide independently, so one token may be kept by
/// several aspects.
pub fn sample_token_mask(
    tape: &mut Tape,
    scores: &AspectScores,
    temperature: f64,
    sampling: &mut MaskSampling<'_>,
) -> Result<TokenMask, MacError> {
    let s = tape.shape(scores.logits).to_vec();
    let onehot = match sampling {
        MaskSampling::Gumbel(rng) => tape.gumbel_softmax_hard(scores.logits, temperature, rng)?,
        MaskSampling::Argmax => {
            let noise = vec![0.0; tape.value(scores.logits).numel()];
            tape.gumbel_softmax_hard_with_noise(scores.logits, &noise, temperature)?
        }
    };
    let keep = tape.narrow(onehot, 3, 0, 1)?;
    let keep = tape.reshape(keep, &s[..3])?;
    Ok(TokenMask {
        keep,
        aspects: scores.aspects.clone(),
    })
}

/// Keep matrix extended over the special-token columns: special token `s`
/// belongs to aspect `s` alone. Returns `[B, k', k + L]`.
fn extend_with_specials(tape: &mut Tape, m: &TokenMask, num_aspects: usize) -> Result<Var, MacError> {
    let s = tape.shape(m.keep).to_vec();
    let (b, rows) = (s[0], s[1]);
    if rows != m.aspects.len() {
        return Err(NumericsError::ShapeMismatch {
            op: "token_mask",
            left: s,
            right: vec![m.aspects.len()],
        }
        .into());
    }
    if let Some(&bad) = m.aspects.iter().find(|&&a| a >= num_aspects) {
        return Err(MacError::AspectOutOfRange {
            aspect: bad,
            num_aspects,
        });
    }
    if !tape.is_relaxed() {
        if let Some(&bad) = tape.value(m.keep).data().iter().find(|&&x| x != 0.0 && x != 1.0) {
            return Err(MacError::NonBinaryMask(bad));
        }
    }
    let mut block = vec![0.0; b * rows * num_aspects];
    for bi in 0..b {
        for (r, &a) in m.aspects.iter().enumerate() {
            block[(bi * rows + r) * num_aspects + a] = 1.0;
        }
    }
    let block = tape.constant(Tensor::new(vec![b, rows, num_aspects], block)?);
    Ok(tape.concat(&[block, m.keep], 2)?)
}

/// Hard deletion: `M' = mᵀm` over the extended keep matrix, binarised to
/// `M̃ = [M' != 0]`, combined as `M̃ + M' - stopgrad(M')`.
///
/// Positions `i`, `j` may interact iff some active aspect keeps both.
pub fn hard_deletion_mask(tape: &mut Tape, m: &TokenMask, num_aspects: usize) -> Result<AttentionMaskMatrix, MacError> {
    let ext = extend_with_specials(tape, m, num_aspects)?;
    let ext_t = tape.transpose_last2(ext)?;
    let carrier = tape.matmul(ext_t, ext)?;
    let binary = tape.binarize_nonzero(carrier);
    let mask = tape.straight_through_combine(binary, carrier)?;
    Ok(AttentionMaskMatrix {
        mask,
        binary: tape.value(binary).clone(),
        carrier,
    })
}

/// Attention mask deletion: `m' = Σ_i m[i]`, `m̂ = [m' != 0] + m' - stopgrad(m')`,
/// broadcast over rows so only the columns of deleted tokens are zeroed.
///
/// The returned `carrier` is the `[B, P]` count vector `m'`.
pub fn amd_mask(tape: &mut Tape, m: &TokenMask, num_aspects: usize) -> Result<AttentionMaskMatrix, MacError> {
    let ext = extend_with_specials(tape, m, num_aspects)?;
    let carrier = tape.sum_axis(ext, 1)?;
    let s = tape.shape(carrier).to_vec();
    let (b, p) = (s[0], s[1]);
    let binary_vec = tape.binarize_nonzero(carrier);
    let hat = tape.straight_through_combine(binary_vec, carrier)?;
    let hat = tape.reshape(hat, &[b, 1, p])?;
    let mask = tape.expand(hat, &[b, p, p])?;
    let bv = tape.value(binary_vec).data();
    let mut binary = Vec::with_capacity(b * p * p);
    for bi in 0..b {
        for _ in 0..p {
            binary.extend_from_slice(&bv[bi * p..(bi + 1) * p]);
        }
    }
    Ok(AttentionMaskMatrix {
        mask,
        binary: Tensor::new(vec![b, p, p], binary)?,
        carrier,
    })
}

/// Dispatches to [`hard_deletion_mask`] or [`amd_mask`].
pub fn attention_mask(
    tape: &mut Tape,
    rule: DeletionRule,
    m: &TokenMask,
    num_aspects: usize,
) -> Result<AttentionMaskMatrix, MacError> {
    match rule {
        DeletionRule::Hard => hard_deletion_mask(tape, m, num_aspects),
        DeletionRule::Amd => amd_mask(tape, m, num_aspects),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keep(tape: &mut Tape, rows: &[&[f64]]) -> TokenMask {
        let len = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TokenMask {
            keep: tape.constant(Tensor::new(vec![1, rows.len(), len], data).unwrap()),
            aspects: (0..rows.len()).collect(),
        }
    }

    fn sub(t: &Tensor, from: usize) -> Vec<Vec<f64>> {
        let p = t.shape()[1];
        (from..p).map(|i| (from..p).map(|j| t.at(&[0, i, j])).collect()).collect()
    }

    #[test]
    fn hard_deletion_example() {
        let mut tape = Tape::new();
        let m = keep(&mut tape, &[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]]);
        let a = hard_deletion_mask(&mut tape, &m, 2).unwrap();
        let carrier = tape.value(a.carrier).clone();
        assert_eq!(
            sub(&carrier, 2),
            vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 2.0]]
        );
        assert_eq!(
            sub(&a.binary, 2),
            vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0], vec![1.0, 1.0, 1.0]]
        );
        assert_eq!(tape.value(a.mask).data(), a.binary.data());
        // Special token 0 sees itself and aspect 0's tokens only.
        let row0: Vec<f64> = (0..5).map(|j| a.binary.at(&[0, 0, j])).collect();
        assert_eq!(row0, vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn amd_example() {
        let mut tape = Tape::new();
        let m = keep(&mut tape, &[&[1.0, 0.0, 1.0], &[0.0, 1.0, 1.0]]);
        let a = amd_mask(&mut tape, &m, 2).unwrap();
        assert_eq!(&tape.value(a.carrier).data()[2..], &[1.0, 1.0, 2.0]);
        for i in 0..5 {
            for j in 2..5 {
                assert_eq!(a.binary.at(&[0, i, j]), 1.0);
            }
        }
    }

    #[test]
    fn deleted_token_is_isolated() {
        let mut tape = Tape::new();
        let m = keep(&mut tape, &[&[1.0, 0.0, 1.0]]);
        let hard = hard_deletion_mask(&mut tape, &m, 1).unwrap();
        for j in 0..4 {
            assert_eq!(hard.binary.at(&[0, 2, j]), 0.0);
            assert_eq!(hard.binary.at(&[0, j, 2]), 0.0);
        }
        let amd = amd_mask(&mut tape, &m, 1).unwrap();
        for i in 0..4 {
            assert_eq!(amd.binary.at(&[0, i, 2]), 0.0);
        }
        // Under AMD the deleted token still attends to kept ones.
        assert_eq!(amd.binary.at(&[0, 2, 1]), 1.0);
    }

    #[test]
    fn rejects_non_binary_mask() {
        let mut tape = Tape::new();
        let m = keep(&mut tape, &[&[0.5, 1.0]]);
        assert!(matches!(
            hard_deletion_mask(&mut tape, &m, 1),
            Err(MacError::NonBinaryMask(_))
        ));
        let mut relaxed = Tape::relaxed();
        let m = keep(&mut relaxed, &[&[0.5, 1.0]]);
        assert!(hard_deletion_mask(&mut relaxed, &m, 1).is_ok());
    }

    #[test]
    fn scores_shape_and_aspect_checks() {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(0);
        let proj = AspectProjections::init(3, 8, 2.0, &mut store, &mut rng);
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let states = tape.constant(Tensor::new(vec![2, 8, 8], rng.normal_vec(128, 1.0)).unwrap());
        let h = HiddenStates {
            states,
            layer_index: 0,
        };
        let s = compute_aspect_scores(&mut tape, &proj, &bound, &h, &[2, 0]).unwrap();
        assert_eq!(tape.shape(s.logits), &[2, 2, 5, 2]);
        assert!(tape.value(s.logits).data().chunks(2).all(|c| c[1] == 0.0));
        let single = multi_task_projection(&mut tape, &proj, &bound, &h, 2).unwrap();
        let a = tape.value(s.logits).data();
        let b = tape.value(single.logits).data();
        assert_eq!(&a[..10], &b[..10]);
        assert!(matches!(
            compute_aspect_scores(&mut tape, &proj, &bound, &h, &[3]),
            Err(MacError::AspectOutOfRange { aspect: 3, .. })
        ));
        assert!(matches!(
            compute_aspect_scores(&mut tape, &proj, &bound, &h, &[]),
            Err(MacError::NoActiveAspects)
        ));
    }

    #[test]
    fn argmax_sampling_keeps_non_negative_logits() {
        let mut tape = Tape::new();
        let logits = Tensor::new(vec![1, 1, 3, 2], vec![0.5, 0.0, -0.5, 0.0, 3.0, 0.0]).unwrap();
        let s = AspectScores {
            logits: tape.constant(logits),
            aspects: vec![0],
        };
        let m = sample_token_mask(&mut tape, &s, 1.0, &mut MaskSampling::Argmax).unwrap();
        assert_eq!(tape.value(m.keep).data(), &[1.0, 0.0, 1.0]);
    }
}
