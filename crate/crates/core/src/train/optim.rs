use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::checkpoint::OptimizerState;
use crate::error::Result;
use crate::registry::ParamRegistry;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over the trainable registry entries. Frozen entries and entries
/// without a gradient are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_state(cfg: AdamConfig, state: OptimizerState) -> Self {
        Self {
            cfg,
            step: state.step,
            m: state.m,
            v: state.v,
        }
    }

    pub fn state(&self) -> OptimizerState {
        OptimizerState {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Returns the number of parameters updated.
    pub fn step(&mut self, reg: &ParamRegistry, grads: &GradStore) -> Result<usize> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bias1 = 1.0 - c.beta1.powi(t);
        let bias2 = 1.0 - c.beta2.powi(t);
        let mut updated = 0;
        for (name, param) in reg.trainable() {
            let Some(g) = grads.get(param.var().as_tensor()) else {
                continue;
            };
            let g = g.detach();
            let m = match self.m.get(&name) {
                Some(m) => ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?,
                None => (&g * (1.0 - c.beta1))?,
            };
            let v = match self.v.get(&name) {
                Some(v) => ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?,
                None => (g.sqr()? * (1.0 - c.beta2))?,
            };
            let step = ((&m / bias1)? / ((&v / bias2)?.sqrt()? + c.eps)?)?;
            let new = (param.value() - (step * c.lr)?)?;
            param.var().set(&new)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name, v);
            updated += 1;
        }
        Ok(updated)
    }
}
