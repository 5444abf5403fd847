//! Central finite-difference verification of analytic gradients.
//!
//! Runs entirely in `f64`. The loss closure must be deterministic: no
//! dropout, no augmentation.

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::{Error, Result};
use crate::optim::{ParamId, Parameter};

/// Gradient magnitudes below this are compared in absolute terms. Central
/// differences of an O(1) loss carry roughly 1e-13 of rounding noise, so a
/// gradient that is identically zero (a key bias under softmax, say) would
/// otherwise report a relative error near 1.
pub const SCALE_FLOOR: f64 = 1e-6;

/// Worst-case error for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub id: ParamId,
    /// Largest element-wise discrepancy divided by the tensor's gradient scale,
    /// `max(|analytic|_inf, |numeric|_inf, SCALE_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }
}

/// Pins a closure to the higher-ranked signature the checks expect, so it
/// can be stored in a variable before use.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a [Parameter<f64>]) -> Result<NodeId>,
{
    f
}

/// Analytic gradients of the loss built by `loss_fn`.
pub fn analytic_gradients<F>(params: &[Parameter<f64>], loss_fn: &F) -> Result<Gradients<f64>>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a [Parameter<f64>]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    g.backward(loss)
}

fn eval_loss<F>(params: &[Parameter<f64>], loss_fn: &F) -> Result<f64>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a [Parameter<f64>]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    Ok(g.value(loss)[0])
}

/// `(L(w + h e_i) - L(w - h e_i)) / 2h` for every element of every parameter.
pub fn numerical_gradients<F>(params: &[Parameter<f64>], loss_fn: &F, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a [Parameter<f64>]) -> Result<NodeId>,
{
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..work.len() {
        let mut grad = vec![0.0; work[p].tensor.numel()];
        for (i, slot) in grad.iter_mut().enumerate() {
            let orig = work[p].tensor.data()[i];
            work[p].tensor.data_mut()[i] = orig + h;
            let up = eval_loss(&work, loss_fn)?;
            work[p].tensor.data_mut()[i] = orig - h;
            let down = eval_loss(&work, loss_fn)?;
            work[p].tensor.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Compares analytic against numerical gradients. A parameter the loss does
/// not reach counts as an all-zero analytic gradient.
pub fn compare(
    params: &[Parameter<f64>],
    analytic: &Gradients<f64>,
    numeric: &[Vec<f64>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    if numeric.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} numeric gradients for {} parameters",
            numeric.len(),
            params.len()
        )));
    }
    let mut checks = Vec::with_capacity(params.len());
    for (i, num) in numeric.iter().enumerate() {
        let id = ParamId(i);
        let zeros;
        let ana = match analytic.get(id) {
            Some(a) => a,
            None => {
                zeros = vec![0.0; num.len()];
                &zeros
            }
        };
        let scale = ana
            .iter()
            .chain(num)
            .fold(0.0f64, |m, v| m.max(v.abs()));
        let max_abs_err = ana
            .iter()
            .zip(num)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let max_rel_err = max_abs_err / scale.max(SCALE_FLOOR);
        checks.push(ParamCheck {
            id,
            max_rel_err,
            max_abs_err,
        });
    }
    Ok(GradCheckReport {
        params: checks,
        tolerance,
    })
}

/// Full check: analytic gradients vs central differences with step `h`.
pub fn grad_check<F>(params: &[Parameter<f64>], loss_fn: F, h: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>, &'a [Parameter<f64>]) -> Result<NodeId>,
{
    let analytic = analytic_gradients(params, &loss_fn)?;
    let numeric = numerical_gradients(params, &loss_fn, h)?;
    compare(params, &analytic, &numeric, tolerance)
}
