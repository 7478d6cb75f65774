//! AdamW with linear warmup and cosine decay.

use std::f64::consts::PI;

use crate::config::OptimizerConfig;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub cfg: OptimizerConfig,
    pub total_steps: u64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &OptimizerConfig, params: &ParamStore, total_steps: u64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.tensor.len()]).collect();
        AdamW {
            cfg: cfg.clone(),
            total_steps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn warmup_steps(&self) -> u64 {
        (self.cfg.warmup_frac * self.total_steps as f64).ceil() as u64
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.cfg.lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.total_steps.saturating_sub(warm).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        self.cfg.lr * 0.5 * (1.0 + (PI * progress).cos())
    }

    /// Global L2 norm over all present gradients.
    pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
        grads
            .iter()
            .flatten()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Applies one update at learning rate `lr`. Parameters without a gradient
    /// still decay their moments and weights, matching a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let clip = if c.grad_clip > 0.0 {
            let norm = Self::grad_norm(grads);
            if norm > c.grad_clip {
                c.grad_clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            let g = grads.get(i).and_then(Option::as_ref);
            let decay = if p.decay { c.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g.data()[j] * clip);
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *w);
            }
        }
    }
}
