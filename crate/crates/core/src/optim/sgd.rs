use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

use super::check_grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr0: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.9,
        }
    }
}

/// Heavy-ball SGD: `v <- mu * v + g; theta <- theta - lr * v`.
#[derive(Clone, Debug)]
pub struct Sgd<S> {
    pub config: SgdConfig,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                config.momentum
            )));
        }
        Ok(Self {
            config,
            velocity: BTreeMap::new(),
        })
    }

    pub fn velocity(&self, name: &str) -> Option<&[S]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Drops state for names that are no longer trained.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.velocity.retain(|k, _| keep(k));
    }

    /// Updates every parameter that has a gradient. Gradients are checked
    /// for finiteness before anything is modified.
    pub fn step(&mut self, params: &mut ParamSet<S>, grads: &ParamSet<S>, lr: f64) -> Result<()> {
        check_grads(params, grads)?;
        let mu = S::of(self.config.momentum);
        let lr = S::of(lr);
        for (name, g) in grads.iter() {
            let theta = params.get_mut(name).expect("checked").data_mut();
            let v = self
                .velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); g.len()]);
            for ((t, vi), gi) in theta.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = mu * *vi + *gi;
                *t -= lr * *vi;
            }
        }
        Ok(())
    }
}

/// Single SGD update of loose parameter/gradient collections.
pub fn sgd_step<S: Scalar>(
    state: &mut Sgd<S>,
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    lr: f64,
) -> Result<()> {
    state.step(params, grads, lr)
}
