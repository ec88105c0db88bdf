use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            state: AdamState::default(),
        }
    }

    /// One bias-corrected update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.state.step += 1;
        let t = self.state.step as i32;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, value, grad) in store.iter_mut_with_grads() {
            let m = self
                .state
                .first
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .state
                .second
                .entry(name.to_string())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, (w, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m = 0.1, v = 0.001; bias-corrected both are 1, so the step is -lr / (1 + eps)
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        store.grad_mut("w").unwrap().data_mut()[0] = 1.0;
        let mut adam = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        adam.step(&mut store);
        let delta = store.get("w").unwrap().item() - 2.0;
        assert!((delta + 0.1).abs() <= 1e-6, "delta = {delta}");
    }

    #[test]
    fn zero_gradient_does_not_move() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::vector(vec![1.0, -3.0]));
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        assert_eq!(store.get("w").unwrap().data(), &[1.0, -3.0]);
    }

    #[test]
    fn parameters_update_independently() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::scalar(1.0));
        store.insert("b", Tensor::scalar(1.0));
        store.grad_mut("b").unwrap().data_mut()[0] = 0.5;
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut store);
        assert_eq!(store.get("a").unwrap().item(), 1.0);
        assert!(store.get("b").unwrap().item() < 1.0);
    }
}
