//! SGD / Adam / AdamW over named `Var`s, with inspectable state so that
//! checkpoints can resume a run exactly.

use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Heavy-ball momentum for SGD.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::AdamW,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            momentum: 0.9,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2), ("momentum", self.momentum)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        Ok(())
    }
}

pub struct Optimizer {
    cfg: OptimConfig,
    vars: Vec<(String, Var)>,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Optimizer {
    pub fn new(vars: Vec<(String, Var)>, cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        let first = vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        let second =
            vars.iter().map(|(_, v)| v.zeros_like()).collect::<candle_core::Result<_>>()?;
        Ok(Self { cfg, vars, first, second, steps: 0 })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.cfg
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, grads: &GradStore) -> Result<()> {
        self.steps += 1;
        let c = self.cfg;
        let t = self.steps as i32;
        for (i, (_, var)) in self.vars.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let theta = var.as_tensor();
            let next = match c.kind {
                OptimizerKind::Sgd => {
                    let g = if c.weight_decay > 0.0 {
                        (g + (theta * c.weight_decay)?)?
                    } else {
                        g.clone()
                    };
                    let m = ((&self.first[i] * c.momentum)? + g)?;
                    let next = (theta - (&m * c.lr)?)?;
                    self.first[i] = m;
                    next
                }
                OptimizerKind::Adam | OptimizerKind::AdamW => {
                    let decoupled = c.kind == OptimizerKind::AdamW;
                    let g = if !decoupled && c.weight_decay > 0.0 {
                        (g + (theta * c.weight_decay)?)?
                    } else {
                        g.clone()
                    };
                    let m = ((&self.first[i] * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
                    let v = ((&self.second[i] * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
                    let m_hat = (&m * (1.0 / (1.0 - c.beta1.powi(t))))?;
                    let v_hat = (&v * (1.0 / (1.0 - c.beta2.powi(t))))?;
                    let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
                    let base = if decoupled && c.weight_decay > 0.0 {
                        (theta * (1.0 - c.lr * c.weight_decay))?
                    } else {
                        theta.clone()
                    };
                    self.first[i] = m;
                    self.second[i] = v;
                    (base - (update * c.lr)?)?
                }
            };
            var.set(&next)?;
        }
        Ok(())
    }

    /// Moment buffers keyed `<param>.m` / `<param>.v`.
    pub fn state(&self) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.vars.iter().enumerate() {
            out.insert(format!("{name}.m"), self.first[i].copy()?);
            out.insert(format!("{name}.v"), self.second[i].copy()?);
        }
        Ok(out)
    }

    pub fn load_state(&mut self, state: &BTreeMap<String, Tensor>, steps: u64) -> Result<()> {
        for (i, (name, var)) in self.vars.iter().enumerate() {
            for (suffix, slot) in [("m", &mut self.first[i]), ("v", &mut self.second[i])] {
                let key = format!("{name}.{suffix}");
                let t = state
                    .get(&key)
                    .ok_or_else(|| Error::State(format!("optimizer state lacks `{key}`")))?;
                if t.dims() != var.dims() {
                    return Err(Error::State(format!("optimizer state `{key}` has wrong shape")));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.steps = steps;
        Ok(())
    }
}
