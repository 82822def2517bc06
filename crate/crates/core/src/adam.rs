//! Adam with bias correction, sweeping a parameter store in name order.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update over all trainable parameters. Requires every trainable
/// parameter to carry a gradient; gradients are zeroed afterwards.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);

    for (name, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let grad = p
            .grad
            .as_ref()
            .ok_or_else(|| Error::MissingGradient(name.clone()))?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(&p.value));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros_like(&p.value));
        for i in 0..grad.len() {
            let g = grad.data()[i];
            let mi = state.beta1 * m.data()[i] + (1.0 - state.beta1) * g;
            let vi = state.beta2 * v.data()[i] + (1.0 - state.beta2) * g * g;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            p.value.data_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    store.zero_grads();
    Ok(())
}
