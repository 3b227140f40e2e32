use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::math;
use crate::params::ParamRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 0.005, weight_decay: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers and step counter of a decoupled-weight-decay Adam optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, reg: &ParamRegistry) -> Self {
        let zeros = || reg.iter().map(|p| alloc::vec![0.0; p.value.len()]).collect();
        OptimizerState { config, step: 0, first_moment: zeros(), second_moment: zeros() }
    }

    /// One AdamW step over every parameter, then zeroes the gradients.
    ///
    /// Weight decay is applied to the parameter directly (`p -= lr * wd * p`)
    /// before the bias-corrected adaptive step, independently of the gradient.
    pub fn update(&mut self, reg: &mut ParamRegistry) -> Result<()> {
        ensure!(
            self.first_moment.len() == reg.len(),
            "optimizer tracks {} parameters, registry has {}",
            self.first_moment.len(),
            reg.len()
        );
        for id in reg.ids() {
            let p = reg.get(id);
            ensure!(p.grad.is_some(), "parameter `{}` has no gradient", p.name);
            ensure!(
                self.first_moment[id.index()].len() == p.value.len(),
                "moment buffer shape mismatch for `{}`",
                p.name
            );
        }

        self.step += 1;
        let AdamWConfig { lr, weight_decay, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - math::powf(beta1, self.step as f64);
        let bc2 = 1.0 - math::powf(beta2, self.step as f64);

        for id in reg.ids() {
            let m = &mut self.first_moment[id.index()];
            let v = &mut self.second_moment[id.index()];
            let p = reg.get_mut(id);
            let grad = p.grad.as_mut().expect("checked above");
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (math::sqrt(v_hat) + eps);
            }
            grad.data_mut().fill(0.0);
        }
        Ok(())
    }
}
