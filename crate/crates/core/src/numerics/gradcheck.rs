//! Central finite-difference validation of tape gradients.

use std::sync::Arc;

use super::autodiff::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{BlendError, Result};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub loss: f64,
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

/// Compare the tape gradient of `loss_fn` with `(f(θ+ε) − f(θ−ε)) / 2ε`
/// for every element of every parameter. Relative error uses the
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(BlendError::InvalidArgument(format!(
            "grad_check eps must lie in [1e-7, 1e-3], got {eps}"
        )));
    }
    let arcs: Vec<Arc<Tensor>> = params.iter().cloned().map(Arc::new).collect();
    let eval = |ps: &[Arc<Tensor>]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = ps.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
        let l = loss_fn(&mut tape, &vars);
        tape.value(l).data()[0]
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = arcs.iter().enumerate().map(|(i, p)| tape.param(i, p)).collect();
    let loss_var = loss_fn(&mut tape, &vars);
    let loss = tape.value(loss_var).data()[0];
    if !loss.is_finite() {
        return Err(BlendError::NonFinite("grad_check loss".into()));
    }
    let again = eval(&arcs);
    if again.to_bits() != loss.to_bits() {
        return Err(BlendError::NonDeterministic {
            first: loss,
            second: again,
        });
    }
    let grads = tape.backward(loss_var, params.len());
    let analytic: Vec<Tensor> = params
        .iter()
        .enumerate()
        .map(|(i, p)| grads.get(i).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0f64;
    let mut worst = (0, 0);
    for (pi, p) in params.iter().enumerate() {
        let mut num = Tensor::zeros(p.shape());
        for e in 0..p.len() {
            let mut work = arcs.clone();
            let mut plus = p.clone();
            plus.data_mut()[e] += eps;
            work[pi] = Arc::new(plus);
            let fp = eval(&work);
            let mut minus = p.clone();
            minus.data_mut()[e] -= eps;
            work[pi] = Arc::new(minus);
            let fm = eval(&work);
            let n = (fp - fm) / (2.0 * eps);
            num.data_mut()[e] = n;
            let a = analytic[pi].data()[e];
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
            if rel > max_rel_error {
                max_rel_error = rel;
                worst = (pi, e);
            }
        }
        numeric.push(num);
    }
    Ok(GradCheckReport {
        loss,
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
