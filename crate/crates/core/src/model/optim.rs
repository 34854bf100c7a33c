use alloc::vec::Vec;

use super::graph::Gradients;
use super::params::ParamStore;
use super::tensor::Tensor;

/// Adam with optional global-norm gradient clipping.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub const NAME: &'static str = "adam(beta1=0.9, beta2=0.999, eps=1e-8)";

    pub fn new(params: &ParamStore, lr: f64, clip: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Applies one update; returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> f64 {
        self.step += 1;
        let norm = libm::sqrt(
            grads
                .grads
                .iter()
                .flatten()
                .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
                .sum(),
        );
        let factor = if self.clip > 0.0 && norm > self.clip { self.clip / norm } else { 1.0 };
        let t = self.step as i32;
        let c1 = 1.0 - libm::pow(self.beta1, t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (id, g) in grads.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            let p = params.value_mut(id);
            for k in 0..g.data.len() {
                let gk = g.data[k] * factor;
                m.data[k] = self.beta1 * m.data[k] + (1.0 - self.beta1) * gk;
                v.data[k] = self.beta2 * v.data[k] + (1.0 - self.beta2) * gk * gk;
                let mh = m.data[k] / c1;
                let vh = v.data[k] / c2;
                p.data[k] -= self.lr * mh / (libm::sqrt(vh) + self.eps);
            }
        }
        norm
    }
}
