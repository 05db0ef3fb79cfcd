//! Adam with bias correction and global-norm clipping.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::params::ParamStore;
use crate::nn::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradients of trainable tensors so their joint L2 norm is
    /// at most this value. `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be non-negative and finite"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "moment decays must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be positive"));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("train.clip_norm", "must be positive"));
        }
        Ok(())
    }
}

/// Moment estimates keyed by tensor name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

/// One update of every trainable tensor that has a gradient. Frozen tensors
/// are never written. Returns the gradient norm before clipping.
pub fn adam_step(
    ps: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<f64> {
    let mut sq = 0.0;
    for (name, g) in grads {
        if !ps.is_trainable(name) {
            continue;
        }
        if g.shape() != ps.tensor(name)?.shape() {
            return Err(Error::Training(format!(
                "gradient for {name} has shape {:?}, tensor has {:?}",
                g.shape(),
                ps.tensor(name)?.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::Training(format!("non-finite gradient for {name}")));
        }
        sq += g.sum_squares();
    }
    let norm = sq.sqrt();
    let scale = match cfg.clip_norm {
        Some(c) if norm > c => c / norm,
        _ => 1.0,
    };
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (name, g) in grads {
        if !ps.is_trainable(name) {
            continue;
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
        let w = ps.tensor_mut(name)?;
        for (((wi, mi), vi), &gi) in w
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            let gi = gi * scale;
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *wi -= cfg.lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}
