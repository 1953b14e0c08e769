use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Adam hyper-parameters plus the batch size used by the training loops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(Error::config("optimizer.beta1", "must lie in (0, 1)"));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::config("optimizer.beta2", "must lie in (0, 1)"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optimizer.lr", "must be positive"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("optimizer.eps", "must be positive"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("optimizer.weight_decay", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("optimizer.batch_size", "must be positive"));
        }
        Ok(())
    }
}

/// First/second moment estimates and the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Float> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        AdamState {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step<T: Float>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len() {
        return Err(Error::shape(&[params.len()], &[grads.len()]));
    }
    for ((p, g), (m, v)) in params.iter().zip(grads).zip(state.m.iter().zip(&state.v)) {
        g.ensure_shape(p.shape())?;
        m.ensure_shape(p.shape())?;
        v.ensure_shape(p.shape())?;
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - cfg.beta1), T::of(1.0 - cfg.beta2));
    let step_size = T::of(cfg.lr / bc1);
    let inv_bc2_sqrt = T::of(1.0 / bc2.sqrt());
    let eps = T::of(cfg.eps);
    let wd = T::of(cfg.weight_decay);
    for (i, p) in params.iter_mut().enumerate() {
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
            let g = gv + wd * *pv;
            *mv = b1 * *mv + one_b1 * g;
            *vv = b2 * *vv + one_b2 * g * g;
            *pv -= step_size * *mv / ((*vv).sqrt() * inv_bc2_sqrt + eps);
        }
    }
    Ok(())
}
