use serde::{Deserialize, Serialize};

use super::ApproxError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm clip applied before the update; `None` disables it.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_grad_norm: None,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Bias-corrected Adam over a fixed list of parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    /// `shapes` lists the flat length of every parameter tensor, in the order
    /// they will be passed to [`Adam::step`].
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            first: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }

    pub fn for_tensors(config: AdamConfig, tensors: &[&[f64]]) -> Self {
        let shapes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.first, &self.second)
    }

    pub fn restore(config: AdamConfig, first: Vec<Vec<f64>>, second: Vec<Vec<f64>>, step: u64) -> Self {
        Self {
            config,
            first,
            second,
            step,
        }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    /// One update. Non-finite gradients abort without touching parameters.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<(), ApproxError> {
        if params.len() != self.first.len() || grads.len() != self.first.len() {
            return Err(ApproxError::DimensionMismatch {
                expected: self.first.len(),
                got: params.len().min(grads.len()),
            });
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.len() != m.len() || g.len() != m.len() {
                return Err(ApproxError::DimensionMismatch {
                    expected: m.len(),
                    got: p.len().min(g.len()),
                });
            }
        }
        if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(ApproxError::NonFiniteGradient);
        }
        let scale = match self.config.max_grad_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.iter())
                    .map(|v| v * v)
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };

        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
            ..
        } = self.config;
        let t = self.step as f64;
        let c1 = 1.0 - beta1.powf(t);
        let c2 = 1.0 - beta2.powf(t);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
