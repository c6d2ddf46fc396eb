//! First-order optimisers: Adam for inversion and teacher training, SGD with
//! momentum for student distillation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 0.25, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<T>,
    pub s: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self { config, step: 0, m: vec![T::zero(); len], s: vec![T::zero(); len] }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step<T: Real>(param: &mut Tensor<T>, grad: &Tensor<T>, state: &mut AdamState<T>) -> Result<()> {
    if param.shape() != grad.shape() || state.m.len() != param.numel() {
        return Err(Error::shape(format!(
            "adam: param {:?}, grad {:?}, state {}",
            param.shape(),
            grad.shape(),
            state.m.len()
        )));
    }
    adam_update(param.data_mut(), grad.data(), state);
    Ok(())
}

pub(crate) fn adam_update<T: Real>(param: &mut [T], grad: &[T], state: &mut AdamState<T>) {
    let cfg = state.config;
    state.step += 1;
    let b1 = T::lit(cfg.beta1);
    let b2 = T::lit(cfg.beta2);
    let one = T::one();
    let step = state.step as i32;
    let c1 = one - T::lit(cfg.beta1.powi(step));
    let c2 = one - T::lit(cfg.beta2.powi(step));
    let lr = T::lit(cfg.lr);
    let eps = T::lit(cfg.eps);
    for i in 0..param.len() {
        let g = grad[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.s[i] = b2 * state.s[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let s_hat = state.s[i] / c2;
        param[i] = param[i] - lr * m_hat / (s_hat.sqrt() + eps);
    }
}

/// SGD with heavy-ball momentum and L2 weight decay (decay folded into the
/// gradient before the momentum buffer, no dampening).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.1, momentum: 0.9, weight_decay: 1e-4 }
    }
}

#[derive(Clone, Debug)]
pub struct SgdState<T> {
    pub config: SgdConfig,
    buffers: Vec<Option<Vec<T>>>,
}

impl<T: Real> SgdState<T> {
    pub fn new(params: usize, config: SgdConfig) -> Self {
        Self { config, buffers: vec![None; params] }
    }

    /// Update parameter tensor number `slot`.
    pub fn step(&mut self, slot: usize, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!("sgd: {:?} vs {:?}", param.shape(), grad.shape())));
        }
        let cfg = self.config;
        let wd = T::lit(cfg.weight_decay);
        let mu = T::lit(cfg.momentum);
        let lr = T::lit(cfg.lr);
        let p = param.data_mut();
        let g = grad.data();
        let buf = &mut self.buffers[slot];
        match buf {
            None => {
                let b: Vec<T> = p.iter().zip(g).map(|(&p, &g)| g + wd * p).collect();
                for (p, &b) in p.iter_mut().zip(&b) {
                    *p = *p - lr * b;
                }
                *buf = Some(b);
            }
            Some(b) => {
                for i in 0..p.len() {
                    let d = g[i] + wd * p[i];
                    b[i] = mu * b[i] + d;
                    p[i] = p[i] - lr * b[i];
                }
            }
        }
        Ok(())
    }
}
