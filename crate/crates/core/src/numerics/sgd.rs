use serde::{Deserialize, Serialize};

use super::params::{GradientMap, ModelParams};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Optimizer settings. `l2_lambda` is the weight of `||Theta||^2` in the loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub l2_lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Heavy-ball momentum; 0 is plain SGD.
    pub momentum: f64,
    /// Rescale the full gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            l2_lambda: 2e-4,
            epochs: 30,
            seed: 0,
            momentum: 0.0,
            clip_norm: None,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid("learning_rate must be positive".into()));
        }
        if !(self.l2_lambda >= 0.0 && self.l2_lambda.is_finite()) {
            return Err(Error::Invalid("l2_lambda must be non-negative".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Invalid("epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must lie in [0, 1)".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Invalid("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

fn check_grads(params: &ModelParams, grads: &GradientMap) -> Result<()> {
    for (name, value) in params.iter() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Invalid(format!("no gradient for parameter '{name}'")))?;
        if g.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "gradient for '{name}' has shape {:?}, parameter has {:?}",
                g.shape(),
                value.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite gradient for parameter '{name}'"
            )));
        }
    }
    Ok(())
}

fn clip_factor(grads: &GradientMap, clip: Option<f64>) -> f64 {
    match clip {
        Some(limit) => {
            let norm = grads.values().map(Tensor::squared_norm).sum::<f64>().sqrt();
            if norm > limit {
                limit / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    }
}

/// One plain SGD update: `theta <- theta - lr * (grad + 2 * lambda * theta)`.
pub fn sgd_step(params: &ModelParams, grads: &GradientMap, cfg: &SgdConfig) -> Result<ModelParams> {
    check_grads(params, grads)?;
    let scale = clip_factor(grads, cfg.clip_norm);
    let mut next = params.clone();
    for (name, value) in next.iter_mut() {
        let g = &grads[name];
        for (p, &d) in value.data_mut().iter_mut().zip(g.data()) {
            *p -= cfg.learning_rate * (scale * d + 2.0 * cfg.l2_lambda * *p);
        }
    }
    Ok(next)
}

/// SGD with optional momentum; keeps one velocity buffer per parameter.
#[derive(Debug, Clone)]
pub struct Sgd {
    cfg: SgdConfig,
    velocity: GradientMap,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self {
            cfg,
            velocity: GradientMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.cfg
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientMap) -> Result<()> {
        if self.cfg.momentum == 0.0 {
            *params = sgd_step(params, grads, &self.cfg)?;
            return Ok(());
        }
        check_grads(params, grads)?;
        let scale = clip_factor(grads, self.cfg.clip_norm);
        let (lr, lambda, mu) = (self.cfg.learning_rate, self.cfg.l2_lambda, self.cfg.momentum);
        for (name, value) in params.iter_mut() {
            let g = &grads[name];
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(value.shape()));
            for ((p, &d), vel) in value.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vel = mu * *vel + scale * d + 2.0 * lambda * *p;
                *p -= lr * *vel;
            }
        }
        Ok(())
    }
}
