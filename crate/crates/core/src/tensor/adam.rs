use std::collections::BTreeMap;

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// First and second moment estimates for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Adam with bias correction. State exists exactly for the parameters
/// named at construction.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    t: u64,
    states: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new<'p>(config: AdamConfig, params: impl IntoIterator<Item = (&'p str, &'p Tensor)>) -> Result<Self> {
        if !(config.lr > 0.0 && config.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be positive, got {}", config.lr)));
        }
        let mut states = BTreeMap::new();
        for (name, t) in params {
            if !t.requires_grad() {
                continue;
            }
            let n = t.numel();
            states.insert(
                name.to_string(),
                AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                },
            );
        }
        Ok(Self { config, t: 0, states })
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn state(&self, name: &str) -> Option<&AdamState> {
        self.states.get(name)
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    /// One update over every gradient-tracking tensor. Tensors that do not
    /// track gradients are skipped untouched.
    pub fn step<'p>(&mut self, params: impl IntoIterator<Item = (&'p str, &'p mut Tensor)>) -> Result<()> {
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (name, tensor) in params {
            if !tensor.requires_grad() {
                continue;
            }
            let state = self
                .states
                .get_mut(name)
                .ok_or_else(|| Error::contract(format!("no optimizer state for {name}")))?;
            let (data, grad) = tensor.data_and_grad_mut();
            let grad = grad.expect("requires_grad implies a gradient buffer");
            if state.m.len() != data.len() {
                return Err(Error::contract(format!("optimizer state for {name} has the wrong size")));
            }
            for i in 0..data.len() {
                let g = grad[i];
                state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
                state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
                let mhat = state.m[i] / bc1;
                let vhat = state.v[i] / bc2;
                data[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        w.set_requires_grad(true);
        w.accumulate_grad(&[0.3, -4.0, 0.0]).unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.01), [("w", &w)]).unwrap();
        opt.step([("w", &mut w)]).unwrap();
        let d = w.data();
        assert!((d[0] - 0.99).abs() < 1e-9);
        assert!((d[1] + 1.99).abs() < 1e-9);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn frozen_tensors_have_no_state_and_do_not_move() {
        let mut w = Tensor::filled(vec![2], 1.0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), [("w", &w)]).unwrap();
        assert_eq!(opt.num_states(), 0);
        opt.step([("w", &mut w)]).unwrap();
        assert_eq!(w.data(), &[1.0, 1.0]);
    }

    #[test]
    fn missing_state_is_a_contract_error() {
        let mut w = Tensor::filled(vec![2], 1.0).unwrap();
        let mut opt = Adam::new(AdamConfig::default(), [("w", &w)]).unwrap();
        w.set_requires_grad(true);
        assert!(matches!(opt.step([("w", &mut w)]), Err(Error::Contract(_))));
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut w = Tensor::new(vec![2], vec![3.0, -1.0]).unwrap();
        w.set_requires_grad(true);
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), [("w", &w)]).unwrap();
        for _ in 0..2000 {
            w.zero_grad();
            let g: Vec<f64> = w.data().iter().map(|x| 2.0 * (x - 0.5)).collect();
            w.accumulate_grad(&g).unwrap();
            opt.step([("w", &mut w)]).unwrap();
        }
        assert!(w.data().iter().all(|x| (x - 0.5).abs() < 1e-3));
    }
}
