//! Adam for the synthesis networks and momentum SGD for recognizer fine-tuning.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam state for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&ParamSet]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .flat_map(|p| p.tensors().iter().map(|t| Tensor::zeros(t.shape())))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// One update over the concatenation of `params`, whose gradients arrive
    /// in the same order.
    pub fn update(&mut self, params: &mut [&mut ParamSet], grads: &[Tensor], lr: f64) -> Result<()> {
        let total: usize = params.iter().map(|p| p.len()).sum();
        if total != grads.len() || total != self.first.len() {
            return Err(Error::Shape(format!(
                "adam tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                total,
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut k = 0;
        for set in params.iter_mut() {
            for p in set.tensors_mut() {
                let (m, v, g) = (&mut self.first[k], &mut self.second[k], &grads[k]);
                let it = p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data());
                for (((p, m), v), &g) in it {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                }
                k += 1;
            }
        }
        Ok(())
    }
}

/// Momentum SGD with L2 weight decay, in the `v = mu*v + lr*(g + wd*w); w -= v` form.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64, params: &ParamSet) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() || params.len() != grads.len() {
            return Err(Error::Shape("sgd gradient count mismatch".into()));
        }
        for ((p, v), g) in params.tensors_mut().iter_mut().zip(&mut self.velocity).zip(grads) {
            let it = p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data());
            for ((p, v), &g) in it {
                *v = self.momentum * *v + lr * (g + self.weight_decay * *p);
                *p -= *v;
            }
        }
        Ok(())
    }
}
