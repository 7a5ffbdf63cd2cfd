//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Added to sqrt(v_hat) in the denominator.
    pub eps_hat: f64,
    /// Decoupled weight decay; applied to matrices (row count > 1) only,
    /// so biases, gains, and other vector params are never shrunk.
    #[serde(default)]
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps_hat: 1e-8, weight_decay: 0.0 }
    }
}

/// Weight decay targets matrices; [1, n] vectors (biases, LayerNorm gains)
/// and scalars keep their magnitude.
fn decays(shape: &[usize]) -> bool {
    shape.first().copied().unwrap_or(0) > 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamState {
    /// Zeroed moments matching the store's current entries.
    pub fn new(params: &ParamStore) -> Self {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, t) in params.iter() {
            m.insert(name.to_string(), Tensor::zeros(t.shape()));
            v.insert(name.to_string(), Tensor::zeros(t.shape()));
        }
        AdamState { step: 0, m, v }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One Adam update. Parameters absent from `grads` are treated as having
/// zero gradient (their moments decay; with zero moments they hold still).
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, _) in grads.iter() {
        if !params.contains(name) {
            return Err(Error::UnknownParam(name.to_string()));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for name in params.names() {
        let m = state
            .m
            .get_mut(&name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let v = state
            .v
            .get_mut(&name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?;
        let p = params.get_mut(&name)?;
        if m.shape() != p.shape() {
            return Err(Error::InvalidShape(format!(
                "optimizer state for {name} has shape {:?}, param has {:?}",
                m.shape(),
                p.shape()
            )));
        }
        let zero;
        let g = match grads.get(&name) {
            Some(g) => {
                if g.shape() != p.shape() {
                    return Err(Error::InvalidShape(format!(
                        "gradient for {name} has shape {:?}, param has {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
                g
            }
            None => {
                zero = Tensor::zeros(p.shape());
                &zero
            }
        };
        let decay = if decays(p.shape()) { cfg.lr * cfg.weight_decay } else { 0.0 };
        for i in 0..p.numel() {
            let gi = g.data()[i];
            let mi = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let pi = p.data()[i];
            p.data_mut()[i] = pi - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps_hat) - decay * pi;
        }
    }
    Ok(())
}
