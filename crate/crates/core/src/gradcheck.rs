//! Central finite-difference comparison against tape gradients.

use std::rc::Rc;

use crate::error::Result;
use crate::layers::{GraphContext, Model};
use crate::param::Bound;
use crate::tensor::{Tape, Tensor, Var};

/// Elements whose analytic gradient is at most this large in magnitude are
/// compared in absolute rather than relative terms.
pub const SMALL_GRADIENT: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a - n| / max(|a|, |n|)` over elements with `|a| > SMALL_GRADIENT`.
    pub max_rel_error: f64,
    /// Largest `|a - n|` over the remaining elements.
    pub max_abs_error_small: f64,
    /// `(input, element)` of the worst relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error < rel_tol && self.max_abs_error_small < rel_tol
    }
}

/// Differentiate `f` with respect to every element of `inputs`, once through
/// the tape and once by central differences with step `h`.
///
/// `f` receives a fresh tape and one leaf per input and must return a scalar.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error_small: 0.0,
        worst: None,
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let zeros = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*var).unwrap_or(&zeros);
        for k in 0..inputs[i].len() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let plus = eval(&work)?;
            work[i].data_mut()[k] = x0 - h;
            let minus = eval(&work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[k];
            let diff = (a - numeric).abs();
            if a.abs() > SMALL_GRADIENT {
                let rel = diff / a.abs().max(numeric.abs());
                if rel > report.max_rel_error {
                    report.max_rel_error = rel;
                    report.worst = Some((i, k));
                }
            } else {
                report.max_abs_error_small = report.max_abs_error_small.max(diff);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Check the cross-entropy gradient of every model parameter.
pub fn check_model(
    model: &Model,
    features: &Tensor,
    ctx: &GraphContext,
    labels: &[usize],
    mask: &[usize],
    h: f64,
) -> Result<GradCheckReport> {
    let labels: Rc<[usize]> = Rc::from(labels);
    let mask: Rc<[usize]> = Rc::from(mask);
    check(&model.params().snapshot(), h, |tape, vars| {
        let p = Bound::from_vars(vars.to_vec());
        let x = tape.constant(features.clone());
        let logits = model.forward(tape, &p, x, ctx)?;
        tape.cross_entropy(logits, labels.clone(), mask.clone())
    })
}
