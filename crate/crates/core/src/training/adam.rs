//! Adam optimizer over the network's optimized tensors.

use serde::{Deserialize, Serialize};

use crate::model::network::Grads;
use crate::model::Network;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

/// First and second moment estimates, aligned with `Network::params`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let zeros: Vec<Vec<f32>> = net
            .params()
            .iter()
            .map(|p| if p.is_optimized() { vec![0.0; p.data.len()] } else { Vec::new() })
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update with bias-corrected step size
    /// `lr * sqrt(1 - b2^t) / (1 - b1^t)`.
    pub fn apply(&mut self, net: &mut Network, grads: &Grads, lr: f64, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let lr_t = (lr * (1.0 - cfg.beta2.powi(t)).sqrt() / (1.0 - cfg.beta1.powi(t))) as f32;
        let (b1, b2, eps) = (cfg.beta1 as f32, cfg.beta2 as f32, cfg.epsilon as f32);
        for (i, p) in net.params_mut().iter_mut().enumerate() {
            let g = &grads.tensors[i];
            if g.is_empty() || !p.is_optimized() {
                continue;
            }
            if self.m[i].len() != g.len() {
                self.m[i] = vec![0.0; g.len()];
                self.v[i] = vec![0.0; g.len()];
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gi), (mi, vi)) in p.data.iter_mut().zip(g).zip(m.iter_mut().zip(v.iter_mut())) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= lr_t * *mi / (vi.sqrt() + eps);
            }
        }
    }
}
