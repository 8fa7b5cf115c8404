//! AdamW: Adam with weight decay applied directly to the parameters rather
//! than folded into the gradient.

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl AdamW {
    /// State for parameters with the given shapes.
    pub fn new(config: AdamWConfig, shapes: &[[usize; 2]]) -> Self {
        let zeros = |s: &[usize; 2]| Tensor::zeros(s[0], s[1]);
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(zeros).collect(),
            second_moment: shapes.iter().map(zeros).collect(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from its gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(AutodiffError::DataLength {
                expected: self.first_moment.len(),
                actual: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first_moment) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "adamw_step",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= lr * weight_decay * *w;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
