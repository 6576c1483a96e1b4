//! Bias-corrected Adam with per-epoch exponential learning-rate decay.

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// `lr0 * decay^epoch`.
pub fn learning_rate(lr0: f64, decay: f64, epoch: usize) -> f64 {
    lr0 * decay.powi(epoch as i32)
}

/// One Adam update of every parameter. Gradients are validated before any
/// parameter is touched.
pub fn adam_step(params: &mut ParamStore, grads: &ParamStore, state: &mut AdamState, lr: f64, cfg: &AdamConfig) -> Result<()> {
    for (path, p) in params.iter() {
        let g = grads.get(path)?;
        if g.shape() != p.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                expected: p.shape().to_vec(),
                got: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(path.clone()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (path, p) in params.iter_mut() {
        let g = grads.get(path)?.data();
        let m = state.m.get_mut(path)?.data_mut();
        let v = state.v.get_mut(path)?.data_mut();
        for i in 0..g.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
