use ndarray::{ArrayD, IxDyn, Zip};
use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Adam {
    pub config: AdamConfig,
    m: Vec<ArrayD<f64>>,
    v: Vec<ArrayD<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<_> = params.iter().map(|(_, p)| ArrayD::zeros(IxDyn(p.shape()))).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamGrads) {
        self.t += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            Zip::from(p)
                .and(&mut self.m[i])
                .and(&mut self.v[i])
                .and(&grads.grads[i])
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= learning_rate * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

/// Plain stochastic gradient descent.
pub struct Sgd;

impl Sgd {
    pub fn step(params: &mut ParamStore, grads: &ParamGrads, learning_rate: f64) {
        for (i, (_, p)) in params.iter_mut().enumerate() {
            Zip::from(p).and(&grads.grads[i]).for_each(|p, &g| *p -= learning_rate * g);
        }
    }
}

/// `lr · (1 − step/total)^power`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolyDecay {
    pub base_lr: f64,
    pub power: f64,
    pub total_steps: u64,
}

impl PolyDecay {
    pub fn lr(&self, step: u64) -> f64 {
        if self.total_steps == 0 {
            return self.base_lr;
        }
        let frac = (step.min(self.total_steps) as f64) / self.total_steps as f64;
        self.base_lr * (1.0 - frac).powf(self.power)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_decay_endpoints() {
        let s = PolyDecay { base_lr: 0.1, power: 0.9, total_steps: 10 };
        assert_eq!(s.lr(0), 0.1);
        assert_eq!(s.lr(10), 0.0);
        assert!((s.lr(5) - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("x", ArrayD::from_elem(IxDyn(&[2]), 1.0));
        let mut g = p.zeros_like();
        g.grads[0] = ArrayD::from_shape_vec(IxDyn(&[2]), vec![3.0, -0.5]).unwrap();
        let mut adam = Adam::new(AdamConfig { learning_rate: 0.01, ..Default::default() }, &p);
        adam.step(&mut p, &g);
        let v = p.get("x").unwrap();
        assert!((v[0] - 0.99).abs() < 1e-7);
        assert!((v[1] - 1.01).abs() < 1e-7);
    }
}
