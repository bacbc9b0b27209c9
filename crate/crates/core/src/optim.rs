//! Adam with bias correction.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates in parameter-store order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub config: AdamConfig,
    pub step: u64,
    pub first: Vec<Tensor<T>>,
    pub second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        OptimizerState {
            config,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    fn check_shapes(&self, params: &ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != params.len() || self.first.len() != params.len() {
            return Err(Error::invalid(format!(
                "{} gradients and {} moments for {} parameters",
                grads.len(),
                self.first.len(),
                params.len()
            )));
        }
        for (k, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
            if p.shape() != g.shape()
                || p.shape() != self.first[k].shape()
                || p.shape() != self.second[k].shape()
            {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: format!("{} {}", params.names()[k], p.shape_string()),
                    rhs: g.shape_string(),
                });
            }
        }
        Ok(())
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn adam_step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        self.check_shapes(params, grads)?;
        for (k, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite gradient for {} at step {}",
                    params.names()[k],
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (T::from_f64(c.beta1), T::from_f64(c.beta2));
        let bc1 = T::from_f64(1.0 - num_traits::Float::powi(c.beta1, t));
        let bc2 = T::from_f64(1.0 - num_traits::Float::powi(c.beta2, t));
        let (lr, eps) = (T::from_f64(c.learning_rate), T::from_f64(c.epsilon));
        let one = T::one();
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[k].data();
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (idx, w) in p.data_mut().iter_mut().enumerate() {
                m[idx] = b1 * m[idx] + (one - b1) * g[idx];
                v[idx] = b2 * v[idx] + (one - b2) * g[idx] * g[idx];
                let m_hat = m[idx] / bc1;
                let v_hat = v[idx] / bc2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("x", Tensor::scalar(x));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.01, 250.0] {
            let mut p = scalar_store(1.0);
            let mut st = OptimizerState::new(AdamConfig::default(), &p);
            st.adam_step(&mut p, &[Tensor::scalar(g)]).unwrap();
            let delta = p.tensors()[0].data()[0] - 1.0;
            assert!((delta.abs() - 1e-4).abs() < 1e-9, "{delta}");
            assert!(delta.signum() == -g.signum());
        }
    }

    #[test]
    fn zero_gradient_keeps_parameters() {
        let mut p = scalar_store(0.7);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        for _ in 0..50 {
            st.adam_step(&mut p, &[Tensor::scalar(0.0)]).unwrap();
        }
        assert_eq!(p.tensors()[0].data()[0], 0.7);
        assert_eq!(st.step, 50);
    }

    #[test]
    fn quadratic_descends_after_warmup() {
        let mut p = scalar_store(3.0);
        let mut st = OptimizerState::new(
            AdamConfig {
                learning_rate: 0.01,
                ..AdamConfig::default()
            },
            &p,
        );
        let mut losses = Vec::new();
        for _ in 0..100 {
            let x = p.tensors()[0].data()[0];
            losses.push(x * x);
            st.adam_step(&mut p, &[Tensor::scalar(2.0 * x)]).unwrap();
        }
        assert!(losses[5..].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn nan_gradient_aborts_without_change() {
        let mut p = scalar_store(1.0);
        let mut st = OptimizerState::new(AdamConfig::default(), &p);
        let err = st.adam_step(&mut p, &[Tensor::scalar(f64::NAN)]);
        assert!(matches!(err, Err(Error::Training(_))));
        assert_eq!(st.step, 0);
        assert_eq!(p.tensors()[0].data()[0], 1.0);
        assert!(st.adam_step(&mut p, &[Tensor::zeros(2, 1)]).is_err());
    }
}
