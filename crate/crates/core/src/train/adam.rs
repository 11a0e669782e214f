use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{ParamStore, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in {param}; step aborted")]
    NonFiniteGradient { param: String },
}

/// Adam with bias correction. Moments are kept in double precision.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<T: Scalar>(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros = || -> Vec<Vec<f64>> { store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect() };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.config.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies one update from the accumulated gradients and zeroes them.
    /// Parameters without a gradient buffer are frozen and skipped. Every
    /// gradient is checked before any weight moves.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<(), OptimError> {
        for (_, p) in store.iter() {
            if p.tensor.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(OptimError::NonFiniteGradient { param: p.name.clone() });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (id, p) in store.iter_mut() {
            let (data, grad) = p.tensor.data_and_grad_mut();
            let Some(grad) = grad else { continue };
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for i in 0..data.len() {
                let g = grad[i].as_f64();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let delta = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                if delta != 0.0 {
                    data[i] = T::from_f64(data[i].as_f64() - delta);
                }
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(values: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s
    }

    fn set_grad(s: &mut ParamStore<f64>, g: &[f64]) {
        let id = s.find("w").unwrap();
        s.get_mut(id).tensor.grad_mut().unwrap().copy_from_slice(g);
    }

    #[test]
    fn first_step_moves_by_lr_against_the_gradient() {
        let mut s = store(&[1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.01, ..Default::default() }, &s);
        set_grad(&mut s, &[3.0, -0.5]);
        adam.step(&mut s).unwrap();
        let w = s.tensor(s.find("w").unwrap()).data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] - 1.01).abs() < 1e-8);
        assert!(s.tensor(s.find("w").unwrap()).grad().unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn zero_gradient_changes_nothing_but_the_counter() {
        let mut s = store(&[0.3, -2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        adam.step(&mut s).unwrap();
        assert_eq!(adam.step, 1);
        assert_eq!(s.tensor(s.find("w").unwrap()).data(), &[0.3, -2.0]);
    }

    #[test]
    fn zero_learning_rate_is_bitwise_identity() {
        let mut s = store(&[0.1, 7.25, -3.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.0, ..Default::default() }, &s);
        set_grad(&mut s, &[1.0, -1e-3, 5.0]);
        adam.step(&mut s).unwrap();
        assert_eq!(s.tensor(s.find("w").unwrap()).data(), &[0.1, 7.25, -3.0]);
    }

    #[test]
    fn quadratic_matches_scalar_simulation() {
        // independent scalar recurrence for f(w) = w^2
        let (mut w, mut m, mut v) = (5.0f64, 0.0f64, 0.0f64);
        for t in 1..=100 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        assert!(w.abs() < 0.5);

        let mut s = store(&[5.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        for _ in 0..100 {
            let cur = s.tensor(s.find("w").unwrap()).data()[0];
            set_grad(&mut s, &[2.0 * cur]);
            adam.step(&mut s).unwrap();
        }
        let got = s.tensor(s.find("w").unwrap()).data()[0];
        assert!((got - w).abs() < 1e-12, "{got} vs {w}");
    }

    #[test]
    fn nan_gradient_aborts_before_any_update() {
        let mut s = store(&[1.0, 2.0]);
        let mut adam = Adam::new(AdamConfig { lr: 0.1, ..Default::default() }, &s);
        set_grad(&mut s, &[1.0, f64::NAN]);
        let err = adam.step(&mut s).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient { param: "w".into() });
        assert_eq!(s.tensor(s.find("w").unwrap()).data(), &[1.0, 2.0]);
        assert_eq!(adam.step, 0);
    }
}
