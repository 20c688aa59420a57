use alloc::vec::Vec;

use super::{NumericsError, Tape, Tensor, Var};

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`; the
    /// floor keeps finite-difference noise on exactly-zero gradients from
    /// counting as a full relative error.
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

/// Central finite-difference check of `f` with respect to every entry of
/// every tensor in `params`.
///
/// `f` receives a fresh tape and one leaf per parameter and returns a scalar
/// loss. It must be deterministic; it is evaluated twice at the base point
/// and a mismatch is reported as [`NumericsError::NonDeterministic`].
/// Set `relaxed` to evaluate every straight-through op on its soft path.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &[Tensor],
    eps: f64,
    relaxed: bool,
) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var, NumericsError>,
{
    if !(eps > 0.0) {
        return Err(NumericsError::InvalidParameter {
            name: "eps",
            value: eps,
        });
    }
    let mut eval = |ps: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Tensor>), NumericsError> {
        let mut tape = if relaxed { Tape::relaxed() } else { Tape::new() };
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape
            .value(loss)
            .item()
            .ok_or_else(|| NumericsError::NotScalar {
                shape: tape.shape(loss).to_vec(),
            })?;
        let mut grads = Vec::new();
        if want_grad {
            tape.backward(loss)?;
            for (v, p) in vars.iter().zip(ps) {
                grads.push(
                    tape.grad_tensor(*v)
                        .unwrap_or_else(|| Tensor::zeros(p.shape())),
                );
            }
        }
        Ok((value, grads))
    };

    let (base, analytic) = eval(params, true)?;
    let (again, _) = eval(params, false)?;
    if base.to_bits() != again.to_bits() {
        return Err(NumericsError::NonDeterministic {
            first: base,
            second: again,
        });
    }

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        entries_checked: 0,
    };
    for pi in 0..params.len() {
        for e in 0..params[pi].numel() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + eps;
            let (plus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig - eps;
            let (minus, _) = eval(&work, false)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[e];
            let denom = libm::fabs(a).max(libm::fabs(numeric)).max(1e-6);
            let rel = libm::fabs(a - numeric) / denom;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = Some((pi, e));
            }
            report.entries_checked += 1;
        }
    }
    Ok(report)
}
