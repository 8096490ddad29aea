use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ParamSet;

use super::check_grads;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub peak_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub layerwise_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            layerwise_decay: 0.75,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) outside [0, 1)", self.beta1, self.beta2));
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps {} must be positive", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.layerwise_decay > 0.0 && self.layerwise_decay <= 1.0) {
            return bad(format!("layerwise_decay {} outside (0, 1]", self.layerwise_decay));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Moments<S> {
    m: Vec<S>,
    v: Vec<S>,
    step: u64,
}

/// AdamW with decoupled weight decay and a per-parameter step counter.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub config: AdamWConfig,
    state: BTreeMap<String, Moments<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            state: BTreeMap::new(),
        })
    }

    pub fn has_state(&self, name: &str) -> bool {
        self.state.contains_key(name)
    }

    pub fn step_count(&self, name: &str) -> Option<u64> {
        self.state.get(name).map(|s| s.step)
    }

    pub fn state_names(&self) -> impl Iterator<Item = &str> {
        self.state.keys().map(String::as_str)
    }

    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        self.state.retain(|k, _| keep(k));
    }

    /// One update of every parameter with a gradient, at learning rate
    /// `lr * group_scale(name)`.
    pub fn step(
        &mut self,
        params: &mut ParamSet<S>,
        grads: &ParamSet<S>,
        lr: f64,
        group_scale: impl Fn(&str) -> f64,
    ) -> Result<()> {
        check_grads(params, grads)?;
        let (b1, b2) = (S::of(self.config.beta1), S::of(self.config.beta2));
        let one = S::one();
        let eps = S::of(self.config.eps);
        let wd = S::of(self.config.weight_decay);
        for (name, g) in grads.iter() {
            let theta = params.get_mut(name).expect("checked").data_mut();
            let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![S::zero(); g.len()],
                v: vec![S::zero(); g.len()],
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let c1 = S::of(1.0 - self.config.beta1.powi(t));
            let c2 = S::of(1.0 - self.config.beta2.powi(t));
            let rate = S::of(lr * group_scale(name));
            for (((th, m), v), &gi) in theta
                .iter_mut()
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
                .zip(g.data())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *th -= rate * (m_hat / (v_hat.sqrt() + eps) + wd * *th);
            }
        }
        Ok(())
    }
}

pub fn adamw_step<S: Scalar>(
    state: &mut AdamW<S>,
    params: &mut ParamSet<S>,
    grads: &ParamSet<S>,
    lr: f64,
    group_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    state.step(params, grads, lr, group_scale)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set(pairs: &[(&str, f64)]) -> ParamSet<f64> {
        pairs
            .iter()
            .map(|(n, v)| (n.to_string(), Tensor::filled(&[1], *v)))
            .collect()
    }

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            weight_decay: wd,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn first_step_matches_hand_evaluation() {
        let mut opt = AdamW::new(cfg(0.01)).unwrap();
        let mut p = set(&[("w", 1.0)]);
        opt.step(&mut p, &set(&[("w", 1.0)]), 0.1, |_| 1.0).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p.get("w").unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut opt = AdamW::new(cfg(0.0)).unwrap();
        let mut p = set(&[("w", 0.42)]);
        opt.step(&mut p, &set(&[("w", 0.0)]), 0.1, |_| 1.0).unwrap();
        assert_eq!(p.get("w").unwrap().data()[0], 0.42);
    }

    #[test]
    fn group_scale_halves_the_move() {
        let mut opt = AdamW::new(cfg(0.0)).unwrap();
        let mut p = set(&[("a", 1.0), ("b", 1.0)]);
        let g = set(&[("a", 0.3), ("b", 0.3)]);
        opt.step(&mut p, &g, 0.1, |n| if n == "b" { 0.5 } else { 1.0 }).unwrap();
        let da = 1.0 - p.get("a").unwrap().data()[0];
        let db = 1.0 - p.get("b").unwrap().data()[0];
        assert!((db - 0.5 * da).abs() < 1e-15);
    }

    #[test]
    fn second_moment_ignores_gradient_sign() {
        let mut pos = AdamW::new(cfg(0.0)).unwrap();
        let mut neg = AdamW::new(cfg(0.0)).unwrap();
        let mut p1 = set(&[("w", 0.0)]);
        let mut p2 = set(&[("w", 0.0)]);
        for g in [0.5, -0.2, 0.9] {
            pos.step(&mut p1, &set(&[("w", g)]), 0.01, |_| 1.0).unwrap();
            neg.step(&mut p2, &set(&[("w", -g)]), 0.01, |_| 1.0).unwrap();
        }
        assert_eq!(p1.get("w").unwrap().data()[0], -p2.get("w").unwrap().data()[0]);
    }

    #[test]
    fn state_is_created_lazily_and_dropped_on_retain() {
        let mut opt = AdamW::new(cfg(0.0)).unwrap();
        let mut p = set(&[("a", 1.0), ("b", 1.0)]);
        opt.step(&mut p, &set(&[("a", 1.0)]), 0.1, |_| 1.0).unwrap();
        assert!(opt.has_state("a") && !opt.has_state("b"));
        opt.step(&mut p, &set(&[("a", 1.0), ("b", 1.0)]), 0.1, |_| 1.0).unwrap();
        assert_eq!(opt.step_count("a"), Some(2));
        assert_eq!(opt.step_count("b"), Some(1));
        opt.retain(|n| n == "b");
        assert!(!opt.has_state("a"));
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(AdamW::<f32>::new(AdamWConfig { beta1: 1.0, ..cfg(0.0) }).is_err());
        assert!(AdamW::<f32>::new(AdamWConfig { eps: 0.0, ..cfg(0.0) }).is_err());
        assert!(AdamW::<f32>::new(cfg(-1.0)).is_err());
        assert!(AdamW::<f32>::new(AdamWConfig { layerwise_decay: 0.0, ..cfg(0.0) }).is_err());
    }
}
