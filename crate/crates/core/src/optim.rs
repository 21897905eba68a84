//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::encoder::{EncoderGradients, EncoderParams};
use crate::error::{Error, Result};

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
        Self {
            lr: 1e-5,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && self.weight_decay >= 0.0
            && self.weight_decay.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::InvalidConfig(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &EncoderParams) -> Result<Self> {
        config.validate()?;
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Ok(Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Fails without touching `params` if any gradient
    /// entry is non-finite.
    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderGradients) -> Result<()> {
        let g = grads.tensors();
        if g.len() != self.m.len() {
            return Err(Error::ShapeMismatch("gradient layout differs from parameters".into()));
        }
        for (name, t) in &g {
            if t.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient((*name).to_string()));
            }
        }
        let c = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let frozen = PAD_ID as usize * params.config().embed_dim..(PAD_ID as usize + 1) * params.config().embed_dim;
        for (ti, (name, theta)) in params.tensors_mut().into_iter().enumerate() {
            let gt = g[ti].1;
            let m = &mut self.m[ti];
            let v = &mut self.v[ti];
            for k in 0..theta.len() {
                if name == "embedding" && frozen.contains(&k) {
                    continue;
                }
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gt[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gt[k] * gt[k];
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + c.eps);
                theta[k] -= c.lr * (update + c.weight_decay * theta[k]);
            }
        }
        Ok(())
    }
}
