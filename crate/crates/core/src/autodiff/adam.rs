use serde::{Deserialize, Serialize};

use crate::autodiff::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            weight_decay: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction; weight decay is an L2 term added to the
/// gradient before the moment update.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        AdamState {
            config,
            m: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            step: 0,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, params: &mut ParamStore) {
        assert_eq!(self.m.len(), params.len(), "optimizer/parameter count mismatch");
        self.step += 1;
        let AdamConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.value.shape(), m.shape());
            let theta = p.value.data_mut();
            let grad = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..theta.len() {
                let g = grad[i] + weight_decay * theta[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * g;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                theta[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        params.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(x: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    fn cfg(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            weight_decay: 0.0,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut s = one_param(1.5);
        let mut adam = AdamState::new(cfg(0.1), &s);
        for _ in 0..10 {
            adam.step(&mut s);
        }
        assert_eq!(s.iter().next().unwrap().value.item(), 1.5);
    }

    #[test]
    fn zero_learning_rate_is_null_update() {
        let mut s = one_param(2.0);
        let mut adam = AdamState::new(cfg(0.0), &s);
        s.iter_mut().next().unwrap().grad = Tensor::scalar(3.0);
        adam.step(&mut s);
        assert_eq!(s.iter().next().unwrap().value.item(), 2.0);
    }

    #[test]
    fn constant_gradient_moves_by_lr() {
        // Scalar simulation of bias-corrected moments: with g constant,
        // mhat = g and vhat = g², so each step moves by lr·g/(|g|+eps).
        let lr = 1e-3;
        let g = 0.37;
        let mut s = one_param(0.0);
        let mut adam = AdamState::new(cfg(lr), &s);
        let mut prev = 0.0;
        for _ in 0..500 {
            s.iter_mut().next().unwrap().grad = Tensor::scalar(g);
            adam.step(&mut s);
            let now = s.iter().next().unwrap().value.item();
            let delta = prev - now;
            assert!((delta - lr * g / (g + 1e-8)).abs() < 1e-12, "delta {delta}");
            prev = now;
        }
        assert_eq!(adam.step, 500);
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut s = one_param(1.0);
        let mut adam = AdamState::new(
            AdamConfig {
                lr: 0.01,
                weight_decay: 0.5,
                ..AdamConfig::default()
            },
            &s,
        );
        adam.step(&mut s);
        // gradient 0 + 0.5·1 > 0, so the first step is -lr in sign.
        let x = s.iter().next().unwrap().value.item();
        assert!((x - (1.0 - 0.01)).abs() < 1e-6);
    }
}
