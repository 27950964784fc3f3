//! First-order optimizers over a [`ParamStore`].

use crate::numcore::ParamStore;

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total <= 1 {
        return lr_max;
    }
    let frac = (step.min(total - 1)) as f64 / (total - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Linear ramp over the first `warmup` steps, then [`cosine_lr`] over the rest.
pub fn warmup_cosine_lr(step: usize, total: usize, warmup: usize, lr_max: f64, lr_min: f64) -> f64 {
    if step < warmup {
        return lr_max * (step + 1) as f64 / warmup as f64;
    }
    cosine_lr(step - warmup, total.saturating_sub(warmup), lr_max, lr_min)
}

/// Rescales gradients so their global norm is at most `max_norm`.
pub fn clip_grad_norm(params: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = params.grad_norm();
    if norm > max_norm {
        params.scale_grads(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        if self.velocity.is_empty() {
            self.velocity = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        }
        for (t, vel) in params.tensors_mut().iter_mut().zip(&mut self.velocity) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for ((w, v), gi) in t.values_mut().iter_mut().zip(vel.iter_mut()).zip(g) {
                *v = self.momentum * *v + gi + self.weight_decay * *w;
                *w -= lr * *v;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, lr: f64) {
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((t, m), v) in params.tensors_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = t.grad().map(<[f64]>::to_vec) else { continue };
            for (((w, mi), vi), gi) in t.values_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                let gi = gi + self.weight_decay * *w;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Tape, Tensor};

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-2, 1e-5), 1e-2);
        assert!((cosine_lr(99, 100, 1e-2, 1e-5) - 1e-5).abs() < 1e-15);
        assert!((warmup_cosine_lr(0, 100, 10, 1e-2, 1e-5) - 1e-3).abs() < 1e-15);
        assert_eq!(warmup_cosine_lr(10, 100, 10, 1e-2, 1e-5), 1e-2);
        assert_eq!(warmup_cosine_lr(42, 100, 0, 1e-2, 1e-5), cosine_lr(42, 100, 1e-2, 1e-5));
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut ps = ParamStore::new();
        let id = ps.add("x", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(0.9, 0.99, 0.0);
        for _ in 0..500 {
            ps.zero_grads();
            let tape = Tape::new();
            let b = ps.bind(&tape);
            let loss = b[id].mul(b[id]).unwrap().sum().unwrap();
            tape.backward(loss).unwrap();
            ps.accumulate_grads(&tape, &b);
            opt.step(&mut ps, 0.05);
        }
        assert!(ps.get(id).values().iter().all(|v| v.abs() < 1e-2));
    }
}
