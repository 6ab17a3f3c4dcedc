//! Leader optimizers. State is threaded explicitly so runs replay exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.98
}

fn default_adam_eps() -> f64 {
    1e-8
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_adam_eps")]
        eps: f64,
    },
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr } => lr > 0.0 && lr.is_finite(),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0
                    && lr.is_finite()
                    && (0.0..1.0).contains(&beta1)
                    && (0.0..1.0).contains(&beta2)
                    && eps > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

pub fn sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    params.iter().zip(grad).map(|(p, g)| p - lr * g).collect()
}

/// One bias-corrected Adam step. An empty state is treated as freshly zeroed.
pub fn adam_step(state: &AdamState, params: &[f64], grad: &[f64], hyper: &AdamHyper) -> (Vec<f64>, AdamState) {
    let n = params.len();
    let mut m = if state.m.is_empty() { vec![0.0; n] } else { state.m.clone() };
    let mut v = if state.v.is_empty() { vec![0.0; n] } else { state.v.clone() };
    let t = state.t + 1;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        out.push(params[i] - hyper.lr * mh / (vh.sqrt() + hyper.eps));
    }
    (out, AdamState { t, m, v })
}

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    Sgd { lr: f64 },
    Adam { hyper: AdamHyper, state: AdamState },
}

impl OptimizerState {
    pub fn new(config: &OptimizerConfig) -> Self {
        match *config {
            OptimizerConfig::Sgd { lr } => OptimizerState::Sgd { lr },
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => OptimizerState::Adam {
                hyper: AdamHyper { lr, beta1, beta2, eps },
                state: AdamState::default(),
            },
        }
    }

    /// Applies one update and returns the new parameters.
    pub fn step(&mut self, params: &[f64], grad: &[f64]) -> Vec<f64> {
        match self {
            OptimizerState::Sgd { lr } => sgd_step(params, grad, *lr),
            OptimizerState::Adam { hyper, state } => {
                let (next, s) = adam_step(state, params, grad, hyper);
                *state = s;
                next
            }
        }
    }
}
