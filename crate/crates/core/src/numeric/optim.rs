use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::Tensor;
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moments, one pair per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.rows(), p.value.cols())).collect();
        AdamState { config, step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update from the gradients stored in `store`.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - math::powi(beta1, state.step as i32);
    let bc2 = 1.0 - math::powi(beta2, state.step as i32);
    for ((p, m), v) in store.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let g = p.grad.data();
        let (m, v) = (m.data_mut(), v.data_mut());
        for (i, x) in p.value.data_mut().iter_mut().enumerate() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *x -= lr * m_hat / (math::sqrt(v_hat) + eps);
        }
    }
}

/// Linear warm-up, plateau, then geometric decay. Epochs are 1-based.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub base: f64,
    pub peak: f64,
    pub warmup_epochs: u32,
    /// First epoch that is decayed.
    pub decay_start: u32,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { base: 0.0005, peak: 0.002, warmup_epochs: 4, decay_start: 15, decay: 0.5 }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: u32) -> f64 {
        let epoch = epoch.max(1);
        if epoch <= self.warmup_epochs {
            if self.warmup_epochs <= 1 {
                return self.peak;
            }
            let f = (epoch - 1) as f64 / (self.warmup_epochs - 1) as f64;
            self.base + f * (self.peak - self.base)
        } else if epoch < self.decay_start {
            self.peak
        } else {
            self.peak * math::powi(self.decay, (epoch - self.decay_start + 1) as i32)
        }
    }
}
