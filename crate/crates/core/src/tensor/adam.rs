use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (classic Adam, not decoupled).
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// Adam optimizer state: one first/second moment tensor per parameter.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.step += 1;
        let c = self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        let wd = T::lit(c.weight_decay);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.shape(), g.shape());
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let grad = gv + wd * *pv;
                *mv = b1 * *mv + (one - b1) * grad;
                *vv = b2 * *vv + (one - b2) * grad * grad;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
