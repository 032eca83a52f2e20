use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.96,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid("learning_rate", "must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(invalid(name, "must lie in (0, 1)"));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("epsilon", "must be positive"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(invalid("weight_decay", "must be nonnegative"));
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    config: OptimizerConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Result<Self> {
        config.validate()?;
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Ok(Adam {
            config,
            first: zeros(),
            second: zeros(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        self.steps += 1;
        let c = &self.config;
        let t = self.steps as f64;
        let bias1 = 1.0 - c.beta1.powf(t);
        let bias2 = 1.0 - c.beta2.powf(t);
        for (i, p) in store.iter_mut().enumerate() {
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let grad = p.grad.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                let mhat = m[j] / bias1;
                let vhat = v[j] / bias2;
                *w -= c.learning_rate * (mhat / (vhat.sqrt() + c.epsilon) + c.weight_decay * *w);
            }
        }
        store.zero_grad();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store_with(&[1.0, -2.0]);
        let mut adam = Adam::new(OptimizerConfig::default(), &s).unwrap();
        adam.step(&mut s).unwrap();
        assert_eq!(s.get(0).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store_with(&[0.0, 0.0]);
        s.get_mut(0).grad = Tensor::new(vec![2], vec![3.0, -0.25]).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.01,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &s).unwrap();
        adam.step(&mut s).unwrap();
        let w = s.get(0).value.data();
        assert!((w[0] + 0.01).abs() < 1e-9);
        assert!((w[1] - 0.01).abs() < 1e-9);
        assert!(s.get(0).grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = store_with(&[0.0]);
        s.get_mut(0).grad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let mut adam = Adam::new(OptimizerConfig::default(), &s).unwrap();
        let err = adam.step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(s.get(0).value.data(), &[0.0]);
    }

    #[test]
    fn quadratic_bowl_descends() {
        let mut s = store_with(&[3.0, -1.5, 0.7]);
        let cfg = OptimizerConfig {
            learning_rate: 0.02,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &s).unwrap();
        let mut losses = Vec::new();
        for _ in 0..200 {
            let w = s.get(0).value.data().to_vec();
            losses.push(w.iter().map(|x| x * x).sum::<f64>());
            s.get_mut(0).grad = Tensor::new(vec![3], w.iter().map(|x| 2.0 * x).collect()).unwrap();
            adam.step(&mut s).unwrap();
        }
        for window in losses.windows(50).step_by(50) {
            assert!(window[49] < window[0], "{} !< {}", window[49], window[0]);
        }
    }
}
