//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::nn::ParamSet;
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, clip_norm: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    pub cfg: AdamWConfig,
    pub step: u64,
    pub m: Vec<Matrix<F>>,
    pub v: Vec<Matrix<F>>,
}

impl<F: Real> AdamW<F> {
    pub fn new(cfg: AdamWConfig, params: &ParamSet<F>) -> Self {
        let zeros = || params.entries().iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect();
        Self { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update at learning rate `lr`. Parameters without a
    /// gradient are left untouched (no decay either). Returns the gradient
    /// norm before clipping.
    pub fn update(&mut self, params: &mut ParamSet<F>, grads: &[Option<Matrix<F>>], lr: f64) -> f64 {
        assert_eq!(grads.len(), params.len(), "gradient count mismatch");
        let norm = grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|x| x.f64() * x.f64()).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm { self.cfg.clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (fb1, fb2, fclip) = (F::c(b1), F::c(b2), F::c(clip));
        for (i, p) in params.entries_mut().iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let decay = if p.decay { F::c(1.0 - lr * self.cfg.weight_decay) } else { F::one() };
            let step = F::c(lr / bc1);
            let inv_bc2 = F::c(1.0 / bc2);
            let eps = F::c(self.cfg.eps);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let gj = g.data()[j] * fclip;
                m[j] = fb1 * m[j] + (F::one() - fb1) * gj;
                v[j] = fb2 * v[j] + (F::one() - fb2) * gj * gj;
                *w = *w * decay - step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
