//! Decoupled-weight-decay Adam.

use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Optimizer state: first/second moments per parameter and the step count.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore<f32>) -> Self {
        let m = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        AdamW { config, step: 0, v: m.clone(), m }
    }

    /// Apply one update from the accumulated gradients (scaled by
    /// `grad_scale`) to every non-frozen parameter, then clear gradients.
    pub fn step(&mut self, store: &mut ParamStore<f32>, grad_scale: f32) {
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = c.lr as f32;
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let step_size = (c.lr * bc2.sqrt() / bc1) as f32;
        let eps = (c.eps * bc2.sqrt()) as f32;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let i = id.index();
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let (value, grad) = (p.value.data_mut(), p.grad.data_mut());
            for j in 0..value.len() {
                let g = grad[j] * grad_scale;
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                if c.weight_decay != 0.0 {
                    value[j] -= lr * c.weight_decay as f32 * value[j];
                }
                value[j] -= step_size * m[j] / (v[j].sqrt() + eps);
                grad[j] = 0.0;
            }
        }
    }
}
