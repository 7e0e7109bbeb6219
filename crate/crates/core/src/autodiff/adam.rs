use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.value.len()]).collect::<Vec<_>>();
        Self { config, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }
}

/// One bias-corrected Adam update over all trainable parameters, using the
/// gradients accumulated in the store.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut AdamState<T>) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::Shape(format!("optimizer tracks {} params, store has {}", state.m.len(), store.len())));
    }
    for p in store.iter() {
        if p.trainable && p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient in parameter `{}`", p.name)));
        }
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        if !p.trainable {
            continue;
        }
        let step_lr = lr * p.lr_scale;
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(&p.grad).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g.as_f64();
            let m_new = beta1 * mi.as_f64() + (1.0 - beta1) * g;
            let v_new = beta2 * vi.as_f64() + (1.0 - beta2) * g * g;
            *mi = T::of(m_new);
            *vi = T::of(v_new);
            let update = step_lr * (m_new / bc1) / ((v_new / bc2).sqrt() + eps);
            *w = T::of(w.as_f64() - update);
        }
    }
    Ok(())
}
