//! Central finite-difference verification of tape gradients.
//!
//! The checker evaluates the same scalar-producing graph twice per parameter
//! element (at `x ± step`) and compares the symmetric difference quotient
//! against the gradient produced by [`Tape::backward`]. The error is
//! relative with a unit floor:
//!
//! ```text
//! err = |analytic - numeric| / max(1, |analytic|, |numeric|)
//! ```
//!
//! so tiny gradients are judged on an absolute scale and large ones
//! relatively.

use super::{Tape, Tensor, TensorError, TensorId};

/// Outcome of a finite-difference sweep over every element of every
/// gradient-carrying parameter.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst relative error seen across all checked elements.
    pub max_rel_err: f64,
    /// Number of scalar elements checked.
    pub checked: usize,
    /// `(parameter index, element index, analytic, numeric)` of the worst
    /// element, if anything was checked.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn eval_loss<F>(params: &[Tensor], build: &F) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).len() != 1 {
        return Err(TensorError::NotScalar {
            op: "finite_difference_check",
            shape: tape.shape(loss).to_vec(),
        });
    }
    Ok(tape.value(loss)[0])
}

/// Checks the analytic gradient of `build` (a closure that reconstructs the
/// same computation on any tape it is given) against central finite
/// differences with the given `step`. Parameters without `requires_grad` are
/// treated as constants and skipped.
pub fn finite_difference_check<F>(
    params: &[Tensor],
    build: F,
    step: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|p| tape.leaf(p)).collect();
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; tape.value(id).len()]))
        .collect();
    drop(tape);

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    for p in 0..work.len() {
        if !work[p].requires_grad() {
            continue;
        }
        for e in 0..work[p].numel() {
            let original = work[p].data()[e];
            work[p].data_mut()[e] = original + step;
            let up = eval_loss(&work, &build)?;
            work[p].data_mut()[e] = original - step;
            let down = eval_loss(&work, &build)?;
            work[p].data_mut()[e] = original;

            let numeric = (up - down) / (2.0 * step);
            let an = analytic[p][e];
            let rel = (an - numeric).abs() / f64::max(1.0, f64::max(an.abs(), numeric.abs()));
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((p, e, an, numeric));
            }
        }
    }
    Ok(report)
}
