//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut p = Vec::new();
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            p.push(format!("{prefix}lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                p.push(format!("{prefix}{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            p.push(format!("{prefix}eps must be positive, got {}", self.eps));
        }
        p
    }
}

/// Moment accumulators for one trainable parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<Moments>,
}

impl OptState {
    /// Zeroed moments for every trainable parameter of `store`, in store order.
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let moments = store
            .params()
            .iter()
            .filter(|p| p.trainable)
            .map(|p| Moments {
                name: p.name.clone(),
                m: Tensor::zeros(p.value.shape().to_vec()),
                v: Tensor::zeros(p.value.shape().to_vec()),
            })
            .collect();
        Self { config, step: 0, moments }
    }

    /// Applies one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let trainable: Vec<_> = store.params_mut().iter_mut().filter(|p| p.trainable).collect();
        if trainable.len() != self.moments.len() {
            return Err(Error::InvalidArgument(format!(
                "optimizer tracks {} parameters but the store has {} trainable",
                self.moments.len(),
                trainable.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (p, mo) in trainable.into_iter().zip(&mut self.moments) {
            if p.name != mo.name || p.value.shape() != mo.m.shape() {
                return Err(Error::InvalidArgument(format!(
                    "optimizer state for {} does not match parameter {} {:?}",
                    mo.name,
                    p.name,
                    p.value.shape()
                )));
            }
            let grad = p.grad.data();
            let value = p.value.data_mut();
            let (m, v) = (mo.m.data_mut(), mo.v.data_mut());
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                value[i] -= update;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s.add_buffer("buf", Tensor::zeros(vec![1]));
        (s, id)
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        s.grad_mut(id).data_mut().copy_from_slice(&[0.3, -5.0]);
        let mut opt = OptState::new(&s, AdamConfig::default());
        opt.step(&mut s).unwrap();
        // bias-corrected first step: m̂ = g, v̂ = g², update ≈ lr·sign(g)
        let w = s.value(id).data();
        assert!((w[0] - (1.0 - 2e-4)).abs() < 1e-10);
        assert!((w[1] - (-2.0 + 2e-4)).abs() < 1e-10);
        assert_eq!(opt.step, 1);
        assert_eq!(opt.moments.len(), 1);
    }

    #[test]
    fn zero_lr_is_exact_identity() {
        let (mut s, id) = store_with(&[0.1, 0.2, -0.3]);
        s.grad_mut(id).data_mut().copy_from_slice(&[1.0, -1.0, 3.0]);
        let before = s.value(id).clone();
        let mut opt = OptState::new(&s, AdamConfig { lr: 0.0, ..AdamConfig::default() });
        for _ in 0..5 {
            opt.step(&mut s).unwrap();
        }
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn matches_scalar_reference_over_steps() {
        let (mut s, id) = store_with(&[0.5]);
        let mut opt = OptState::new(&s, AdamConfig::default());
        let (mut p, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 2.0 * p - 0.1 * t as f64;
            s.grad_mut(id).data_mut()[0] = g;
            opt.step(&mut s).unwrap();
            m = 0.5 * m + 0.5 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.5f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            p -= 2e-4 * mh / (vh.sqrt() + 1e-8);
            assert!((s.value(id).data()[0] - p).abs() < 1e-15);
        }
    }

    #[test]
    fn config_problems_are_listed() {
        let bad = AdamConfig { lr: -1.0, beta1: 1.0, beta2: -0.1, eps: 0.0 };
        assert_eq!(bad.problems("").len(), 4);
        assert!(AdamConfig::default().problems("").is_empty());
    }
}
