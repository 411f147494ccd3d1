use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for every parameter of a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct AdamState<S: Scalar = f64> {
    pub config: AdamConfig,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &ParamSet<S>) -> Self {
        let zeros = |t: (&str, &crate::Tensor<S>)| vec![S::zero(); t.1.numel()];
        Self {
            config,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update from the gradients stored on `params`.
    /// A parameter without a gradient is updated as if its gradient were zero.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<()> {
        if params.len() != self.first.len() {
            return Err(dim_err("adam_step", &[params.len()], &[self.first.len()]));
        }
        for (i, t) in params.tensors_mut().iter().enumerate() {
            if t.numel() != self.first[i].len() {
                return Err(dim_err("adam_step", t.shape(), &[self.first[i].len()]));
            }
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let lr = S::lit(c.lr);
        let eps = S::lit(c.epsilon);
        let bc1 = S::one() - b1.powi(self.step as i32);
        let bc2 = S::one() - b2.powi(self.step as i32);
        for (i, t) in params.tensors_mut().iter_mut().enumerate() {
            let grad = t.grad().map(<[S]>::to_vec);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = t.data_mut();
            for j in 0..data.len() {
                let g = grad.as_ref().map_or(S::zero(), |g| g[j]);
                m[j] = b1 * m[j] + (S::one() - b1) * g;
                v[j] = b2 * v[j] + (S::one() - b2) * g * g;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
