//! Trainable parameters and the Adam update.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Index of a parameter within the owning model's parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// A tensor plus the optimizer state that travels with it.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<S = f32> {
    pub tensor: Tensor<S>,
    adam_m: Vec<S>,
    adam_v: Vec<S>,
    step_count: u64,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(tensor: Tensor<S>) -> Self {
        let n = tensor.numel();
        Parameter {
            tensor,
            adam_m: vec![S::zero(); n],
            adam_v: vec![S::zero(); n],
            step_count: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn first_moment(&self) -> &[S] {
        &self.adam_m
    }

    pub fn second_moment(&self) -> &[S] {
        &self.adam_v
    }

    /// Copy of the parameter in another precision with fresh optimizer state.
    pub fn cast<T: Scalar>(&self) -> Parameter<T> {
        Parameter::new(self.tensor.cast())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Applies one bias-corrected Adam update to every parameter and clears the
/// gradients. Every parameter must carry a gradient.
pub fn adam_step<S: Scalar>(params: &mut [Parameter<S>], cfg: &AdamConfig) -> Result<()> {
    if let Some(i) = params.iter().position(|p| p.tensor.grad().is_none()) {
        return Err(Error::Contract(format!(
            "adam_step: parameter {i} has no gradient"
        )));
    }
    let (b1, b2) = (S::from_f64(cfg.beta1), S::from_f64(cfg.beta2));
    let one = S::one();
    for p in params.iter_mut() {
        let grad = p.tensor.take_grad().expect("checked above");
        p.step_count += 1;
        let t = p.step_count as i32;
        // Corrections are computed in f64: beta^t underflows f32 precision early.
        let c1 = S::from_f64(1.0 - cfg.beta1.powi(t));
        let c2 = S::from_f64(1.0 - cfg.beta2.powi(t));
        let lr = S::from_f64(cfg.lr);
        let eps = S::from_f64(cfg.eps);
        let Parameter {
            tensor,
            adam_m,
            adam_v,
            ..
        } = p;
        for (((w, g), m), v) in tensor
            .data_mut()
            .iter_mut()
            .zip(&grad)
            .zip(adam_m.iter_mut())
            .zip(adam_v.iter_mut())
        {
            *m = b1 * *m + (one - b1) * *g;
            *v = b2 * *v + (one - b2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
