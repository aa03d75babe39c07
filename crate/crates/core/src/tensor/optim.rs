//! Named trainable parameters and the Adam optimizer.

use std::collections::HashMap;

use super::{Tensor, TensorError};

/// A leaf tensor with a stable name. Names key optimizer state and let
/// initialisation derive per-parameter random streams, so adding or removing
/// other parameters never perturbs this one.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        assert!(value.requires_grad(), "parameters must require gradients");
        Parameter { name: name.into(), value }
    }
}

/// Clears accumulated gradients on every parameter.
pub fn zero_grads(params: &[Parameter]) {
    for p in params {
        p.value.zero_grad();
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. First and second moments persist across steps,
/// keyed by parameter name.
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        assert!(cfg.lr > 0.0 && cfg.eps > 0.0, "adam lr and eps must be positive");
        assert!(
            (0.0..1.0).contains(&cfg.beta1) && (0.0..1.0).contains(&cfg.beta2),
            "adam betas must lie in [0, 1)"
        );
        Adam { cfg, t: 0, moments: HashMap::new() }
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One update over all parameters. Every parameter must carry a gradient
    /// (run `backward` first); gradients are consumed and cleared.
    pub fn step(&mut self, params: &[Parameter]) -> Result<(), TensorError> {
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for p in params {
            let g = p
                .value
                .grad()
                .ok_or_else(|| TensorError::MissingGrad(p.name.clone()))?;
            let (m, v) = self
                .moments
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let mut data = p.value.to_vec();
            for i in 0..g.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let m_hat = m[i] / b1t;
                let v_hat = v[i] / b2t;
                data[i] -= self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
            p.value.set_data(&data);
            p.value.zero_grad();
        }
        Ok(())
    }
}
