//! Adam with linear warmup and global-norm gradient clipping.

use crate::error::{ensure, Error, Result};
use crate::numerics::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub warmup_steps: usize,
    /// Maximum global gradient norm (κ).
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(base_lr: f64, warmup_steps: usize, clip_norm: f64) -> Self {
        Self { base_lr, warmup_steps, clip_norm, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Learning rate used for update number `step` (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.base_lr;
        }
        self.base_lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub config: AdamConfig,
    step: usize,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

/// Norm and learning rate of one update, for logging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    pub grad_norm: f64,
    pub lr: f64,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Result<Self> {
        ensure!(config.clip_norm > 0.0, Contract, "clip norm must be positive, got {}", config.clip_norm);
        ensure!(config.base_lr >= 0.0, Contract, "learning rate must be non-negative");
        let zeros: Vec<Vec<f64>> = params.ids().map(|id| vec![0.0; params.get(id).numel()]).collect();
        Ok(Self { config, step: 0, first: zeros.clone(), second: zeros })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.first[index], &self.second[index])
    }
}

/// Global L2 norm of all present gradients.
pub fn grad_norm(params: &ParamStore) -> f64 {
    params
        .ids()
        .filter_map(|id| params.grad(id))
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// pre-clip norm. Gradients already within the bound are left untouched.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if let (_, Some(g)) = params.value_and_grad_mut(id) {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}

/// One clipped, bias-corrected Adam update; clears gradients afterwards.
pub fn adam_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<StepInfo> {
    ensure!(
        state.first.len() == params.len(),
        Contract,
        "optimizer state tracks {} tensors, store has {}",
        state.first.len(),
        params.len()
    );
    if !params.has_grads() {
        return Err(Error::Contract("adam_step called without gradients; run backward first".into()));
    }
    let norm = clip_grad_norm(params, state.config.clip_norm);
    state.step += 1;
    let cfg = &state.config;
    let lr = cfg.lr_at(state.step);
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let (value, grad) = params.value_and_grad_mut(id);
        let Some(grad) = grad else { continue };
        let m = &mut state.first[id.index()];
        let v = &mut state.second[id.index()];
        ensure!(m.len() == grad.len(), Dimension, "moment shape mismatch for parameter {}", id.index());
        for (((p, &g), mi), vi) in value.data_mut().iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    params.zero_grads();
    Ok(StepInfo { grad_norm: norm, lr })
}
