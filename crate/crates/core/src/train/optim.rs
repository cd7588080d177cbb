use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tensor::{Real, Tensor};

/// Adaptive-moment optimizer with decoupled weight decay and a cosine
/// learning-rate schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to conv weights only, not to biases or batch-norm affine terms.
    pub weight_decay: f64,
    /// Steps over which the rate decays from `lr` to `min_lr`; 0 keeps it flat.
    pub decay_steps: usize,
    pub min_lr: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            decay_steps: 0,
            min_lr: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.min_lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }

    /// Learning rate used at 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.decay_steps == 0 {
            return self.lr;
        }
        let t = step.min(self.decay_steps) as f64 / self.decay_steps as f64;
        self.min_lr + 0.5 * (self.lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// Moment buffers for every trainable tensor, in trainable order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: usize,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> OptimState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        let zeros: Vec<Tensor<T>> = params.trainable().iter().map(|t| Tensor::zeros(t.shape())).collect();
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from gradients given in trainable order.
    pub fn update(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>], cfg: &AdamWConfig) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::shape(
                "optimizer",
                format!("{} gradients for {} trainable tensors", grads.len(), self.m.len()),
            ));
        }
        let lr = cfg.lr_at(self.step);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (b1t, b2t, eps) = (T::of(b1), T::of(b2), T::of(cfg.eps));
        let (nb1, nb2) = (T::of(1.0 - b1), T::of(1.0 - b2));
        let (step_size, root_c2) = (T::of(lr / c1), T::of(c2.sqrt()));

        let trainable: Vec<(usize, bool)> = params
            .specs()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.trainable)
            .map(|(i, s)| (i, s.name.ends_with(".w")))
            .collect();
        let values = params.values_mut();
        for (slot, &(pi, decay)) in trainable.iter().enumerate() {
            let g = &grads[slot];
            if g.shape() != values[pi].shape() {
                return Err(Error::shape("optimizer", format!("gradient {slot} has the wrong shape")));
            }
            let shrink = T::of(1.0 - lr * if decay { cfg.weight_decay } else { 0.0 });
            let (m, v) = (self.m[slot].data_mut(), self.v[slot].data_mut());
            for (((p, &gi), mi), vi) in values[pi].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1t * *mi + nb1 * gi;
                *vi = b2t * *vi + nb2 * gi * gi;
                *p = *p * shrink - step_size * *mi / ((*vi).sqrt() / root_c2 + eps);
            }
        }
        Ok(())
    }
}
