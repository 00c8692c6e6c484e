use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_batch_size() -> usize {
    32
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            momentum: default_momentum(),
            weight_decay: 0.0,
            batch_size: default_batch_size(),
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }
}

/// Anything exposing named trainable tensors.
pub trait ParamSet<S> {
    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<S>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<S>));

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, t| t.grad = None);
    }
}

/// SGD with heavy-ball momentum and L2 weight decay.
///
/// `v <- momentum * v + (grad + weight_decay * theta)`, `theta <- theta - lr * v`.
/// Parameters without a gradient are left untouched.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    config: SgdConfig,
    velocity: HashMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: SgdConfig) -> Self {
        Self {
            config,
            velocity: HashMap::new(),
        }
    }

    pub fn config(&self) -> &SgdConfig {
        &self.config
    }

    /// Applies one update to every parameter holding a gradient, then clears
    /// all gradients.
    pub fn step(&mut self, params: &mut dyn ParamSet<S>) -> Result<()> {
        let lr = S::of(self.config.learning_rate);
        let mu = S::of(self.config.momentum);
        let wd = S::of(self.config.weight_decay);
        let mut updated = 0usize;
        let velocity = &mut self.velocity;
        params.visit_params_mut(&mut |name, t| {
            let Some(grad) = t.grad.take() else {
                return;
            };
            updated += 1;
            let v = velocity
                .entry(name.to_string())
                .or_insert_with(|| vec![S::zero(); grad.len()]);
            for ((vi, &g), &w) in v.iter_mut().zip(&grad).zip(t.data()) {
                *vi = mu * *vi + g + wd * w;
            }
            if lr != S::zero() {
                t.data_mut().iter_mut().zip(v.iter()).for_each(|(w, &vi)| *w -= lr * vi);
            }
        });
        if updated == 0 {
            return Err(Error::Usage("sgd step without any populated gradient".into()));
        }
        Ok(())
    }
}

/// One optimizer step with a fresh (zero) momentum buffer.
pub fn sgd_step<S: Scalar>(params: &mut dyn ParamSet<S>, config: &SgdConfig) -> Result<()> {
    Sgd::new(*config).step(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct One(Tensor<f64>);

    impl ParamSet<f64> for One {
        fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
            f("w", &self.0)
        }
        fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
            f("w", &mut self.0)
        }
    }

    fn plain(lr: f64) -> SgdConfig {
        SgdConfig {
            learning_rate: lr,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
        }
    }

    #[test]
    fn zero_lr_is_bitwise_identity() {
        let mut p = One(Tensor::new(vec![3], vec![-0.0, 1.5, -2.25]).unwrap());
        let before = p.0.clone();
        p.0.grad = Some(vec![-1.0, 3.0, 0.5]);
        let mut opt = Sgd::new(SgdConfig { momentum: 0.9, ..plain(0.0) });
        opt.step(&mut p).unwrap();
        assert!(p.0.bitwise_eq(&before));
        assert!(p.0.grad.is_none());
    }

    #[test]
    fn single_step_moves_by_lr() {
        let mut p = One(Tensor::scalar(2.0));
        p.0.grad = Some(vec![1.0]);
        sgd_step(&mut p, &plain(0.1)).unwrap();
        assert!((p.0.data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn quadratic_recurrence() {
        // d/dθ ½θ² = θ, so θ_{t+1} = 0.9 θ_t.
        let mut p = One(Tensor::scalar(1.0));
        let mut opt = Sgd::new(plain(0.1));
        for _ in 0..10 {
            p.0.grad = Some(vec![p.0.data()[0]]);
            opt.step(&mut p).unwrap();
        }
        assert!((p.0.data()[0] - 0.9f64.powi(10)).abs() < 1e-12);
        assert!((p.0.data()[0] - 0.3487).abs() < 1e-4);
    }

    #[test]
    fn missing_grads_is_usage_error() {
        let mut p = One(Tensor::scalar(1.0));
        assert!(matches!(sgd_step(&mut p, &plain(0.1)), Err(Error::Usage(_))));
    }

    #[test]
    fn weight_decay_adds_to_gradient() {
        let mut p = One(Tensor::scalar(2.0));
        p.0.grad = Some(vec![0.0]);
        sgd_step(&mut p, &SgdConfig { weight_decay: 0.5, ..plain(0.1) }).unwrap();
        assert!((p.0.data()[0] - 1.9).abs() < 1e-15);
    }
}
