use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Gradients, Predictor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub step: u64,
    pub m: Vec<S>,
    pub v: Vec<S>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(len: usize) -> Self {
        AdamState { step: 0, m: vec![S::zero(); len], v: vec![S::zero(); len] }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update<S: Scalar>(params: &mut [S], grads: &[S], cfg: &AdamConfig, state: &mut AdamState<S>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch(format!("{} parameters, {} gradients, {} moments", params.len(), grads.len(), state.m.len())));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
    let c1 = S::one() / (S::one() - b1.powi(t));
    let c2 = S::one() / (S::one() - b2.powi(t));
    let (lr, eps) = (S::lit(cfg.lr), S::lit(cfg.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (S::one() - b1) * g;
        *v = b2 * *v + (S::one() - b2) * g * g;
        *p -= lr * (*m * c1) / ((*v * c2).sqrt() + eps);
    }
    Ok(())
}

/// [`adam_update`] on a predictor's parameters.
pub fn adam_step<S: Scalar>(p: &mut Predictor<S>, grads: &Gradients<S>, cfg: &AdamConfig, state: &mut AdamState<S>) -> Result<()> {
    adam_update(p.params_mut(), &grads.values, cfg, state)
}
