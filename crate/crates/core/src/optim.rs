//! Adam / AdamW and the cosine learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay (AdamW); zero gives plain Adam.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Bias-corrected Adam over a fixed list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub steps: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, steps: 0, m: Vec::new(), v: Vec::new() }
    }

    /// `θ ← θ − lr·(m̂/(√v̂ + ε) + λθ)`. Rejects non-finite gradients before touching any state.
    pub fn step<F: Real>(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>], lr: f32) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("adam", format!("{} params, {} grads", params.len(), grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != g.numel() {
                return Err(Error::shape("adam", format!("tensor {i}: {:?} vs grad {:?}", p.shape(), g.shape())));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite { context: format!("gradient of tensor {i}") });
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| alloc::vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - libm::pow(beta1, t as f64);
        let c2 = 1.0 - libm::pow(beta2, t as f64);
        let lr = lr as f64;
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gf;
                *vv = beta2 * *vv + (1.0 - beta2) * gf * gf;
                let update = (*mv / c1) / (libm::sqrt(*vv / c2) + eps);
                let theta = pv.as_f64();
                *pv = F::from_f64(theta - lr * (update + weight_decay * theta));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base` to zero over `total` steps.
pub fn cosine_lr(base: f32, step: usize, total: usize) -> f32 {
    if total == 0 {
        return base;
    }
    let frac = (step.min(total) as f64) / total as f64;
    (base as f64 * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * frac))) as f32
}
