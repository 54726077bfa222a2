//! First-order optimizers as pure state transitions.

use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{NnError, NnResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Momentum,
    Adam,
}

impl OptimizerKind {
    /// Number of parameter-shaped accumulators the rule keeps.
    pub fn n_moments(self) -> usize {
        match self {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Momentum => 1,
            OptimizerKind::Adam => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum => "momentum",
            OptimizerKind::Adam => "adam",
        }
    }
}

fn default_beta() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

/// Update rule and hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Momentum coefficient (momentum) or first-moment decay (Adam).
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: default_beta(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn momentum(lr: f64, beta: f64) -> Self {
        Self {
            kind: OptimizerKind::Momentum,
            beta1: beta,
            ..Self::sgd(lr)
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(format!("learning rate must be finite and non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if self.eps <= 0.0 {
            return Err("eps must be positive".into());
        }
        Ok(())
    }
}

/// Optimizer state: rule, moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub moments: Vec<ParamVector>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, like: &ParamVector) -> Self {
        let moments = (0..config.kind.n_moments())
            .map(|_| ParamVector::zeros(like.layout().clone()))
            .collect();
        Self {
            config,
            moments,
            step: 0,
        }
    }

    /// Pure update: returns new parameters and state, inputs untouched.
    pub fn apply(&self, params: &ParamVector, grad: &ParamVector) -> NnResult<(ParamVector, OptimizerState)> {
        let mut next = self.clone();
        let mut p = params.clone();
        next.apply_in_place(&mut p, grad)?;
        Ok((p, next))
    }

    pub fn apply_in_place(&mut self, params: &mut ParamVector, grad: &ParamVector) -> NnResult<()> {
        params.check_layout(grad)?;
        for m in &self.moments {
            if !m.same_layout(params) {
                return Err(NnError::Config("optimizer moments do not match parameters".into()));
            }
        }
        self.step += 1;
        let c = self.config;
        let g = grad.values();
        match c.kind {
            OptimizerKind::Sgd => {
                for (p, gi) in params.values_mut().iter_mut().zip(g) {
                    *p -= c.lr * gi;
                }
            }
            OptimizerKind::Momentum => {
                let v = self.moments[0].values_mut();
                for ((p, vi), gi) in params.values_mut().iter_mut().zip(v.iter_mut()).zip(g) {
                    *vi = c.beta1 * *vi + gi;
                    *p -= c.lr * *vi;
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let (m_part, v_part) = self.moments.split_at_mut(1);
                let m = m_part[0].values_mut();
                let v = v_part[0].values_mut();
                for (((p, mi), vi), gi) in params
                    .values_mut()
                    .iter_mut()
                    .zip(m.iter_mut())
                    .zip(v.iter_mut())
                    .zip(g)
                {
                    *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                    *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                    let m_hat = *mi / bc1;
                    let v_hat = *vi / bc2;
                    *p -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
                }
            }
        }
        Ok(())
    }
}
