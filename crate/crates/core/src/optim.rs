//! AdamW with decoupled weight decay, the cosine learning-rate schedule,
//! and the patience-based stopping rule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// First/second moment estimates, one pair per parameter in store order.
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let zeros: Vec<Tensor> =
            store.refs().map(|r| Tensor::zeros(store.get(r).shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One optimizer step over every parameter in the store. `grads` aligns
/// with `store.refs()` order; the decoupled decay θ ← θ·(1−lr·wd) is
/// applied separately from the adaptive update.
pub fn adamw_step(
    store: &mut ParamStore,
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    hyper: &AdamHyper,
) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract {
            op: "adamw_step",
            details: format!("{} gradients for {} parameters", grads.len(), store.len()),
        });
    }
    let refs: Vec<_> = store.refs().collect();
    for (i, &rf) in refs.iter().enumerate() {
        if store.get(rf).shape() != grads[i].shape() {
            return Err(Error::shape(
                "adamw_step",
                format!(
                    "gradient {:?} vs parameter {} {:?}",
                    grads[i].shape(),
                    store.name(rf),
                    store.get(rf).shape()
                ),
            ));
        }
        if grads[i].data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric(format!(
                "NaN gradient for parameter {}",
                store.name(rf)
            )));
        }
    }

    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - hyper.beta1.powf(t);
    let bc2 = 1.0 - hyper.beta2.powf(t);
    for (i, &rf) in refs.iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let theta = store.get_mut(rf).data_mut();
        for j in 0..g.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            theta[j] -= lr * hyper.weight_decay * theta[j];
            theta[j] -= lr * m_hat / (v_hat.sqrt() + hyper.eps);
        }
    }
    Ok(())
}

/// lr_min + ½(lr0−lr_min)(1+cos(π·min(epoch,T_max)/T_max)); flat at
/// lr_min past T_max.
pub fn cosine_lr(epoch: usize, lr0: f64, lr_min: f64, t_max: usize) -> f64 {
    let e = epoch.min(t_max) as f64;
    lr_min + 0.5 * (lr0 - lr_min) * (1.0 + (std::f64::consts::PI * e / t_max as f64).cos())
}

/// Patience rule on a maximized validation score. Epochs are counted
/// from 1; stopping is only allowed once `min_epochs` have run.
pub struct EarlyStop {
    patience: usize,
    min_epochs: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
}

pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStop {
    pub fn new(patience: usize, min_epochs: usize) -> EarlyStop {
        EarlyStop {
            patience,
            min_epochs,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            epoch: 0,
        }
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }

    /// Record one epoch's validation score.
    pub fn observe(&mut self, score: f64) -> StopDecision {
        self.epoch += 1;
        let improved = score > self.best;
        if improved {
            self.best = score;
            self.best_epoch = self.epoch;
        }
        let stop =
            self.epoch >= self.min_epochs && self.epoch - self.best_epoch > self.patience;
        StopDecision { improved, stop }
    }
}
