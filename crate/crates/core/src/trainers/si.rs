//! Synaptic Intelligence bookkeeping over the feature extractor.
//!
//! Per step: `omega_k += -g_k * delta_k` with `g` the task-loss gradient.
//! Per task end: `Omega_k += max(omega_k, 0) / ((theta_k - theta*_k)^2 + xi)`,
//! then `omega <- 0`, `theta* <- theta`. The penalty
//! `c * sum_k Omega_k (theta_k - theta*_k)^2` applies from the second task on.

use crate::autodiff::ParamSet;
use crate::FeatureExtractor;

#[derive(Debug, Clone, PartialEq)]
pub struct SiState {
    /// Running path integral for the current task.
    pub omega: Vec<f64>,
    /// Consolidated importance.
    pub big_omega: Vec<f64>,
    /// Reference parameters from the end of the previous task.
    pub theta_star: Vec<f64>,
    pub c: f64,
    pub xi: f64,
    /// Number of consolidated tasks.
    pub tasks_seen: usize,
}

pub(crate) fn flatten(extractor: &FeatureExtractor) -> Vec<f64> {
    let mut out = Vec::with_capacity(extractor.param_count());
    extractor.visit_params(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Flattened gradients, zeros where a tensor has none.
pub(crate) fn flatten_grads(extractor: &FeatureExtractor) -> Vec<f64> {
    let mut out = Vec::with_capacity(extractor.param_count());
    extractor.visit_params(&mut |_, t| match &t.grad {
        Some(g) => out.extend_from_slice(g),
        None => out.extend(std::iter::repeat_n(0.0, t.len())),
    });
    out
}

impl SiState {
    /// Zero importances anchored at the initial extractor.
    pub fn new(extractor: &FeatureExtractor, c: f64, xi: f64) -> Self {
        let theta_star = flatten(extractor);
        let n = theta_star.len();
        Self {
            omega: vec![0.0; n],
            big_omega: vec![0.0; n],
            theta_star,
            c,
            xi,
            tasks_seen: 0,
        }
    }

    pub fn penalty_active(&self) -> bool {
        self.c != 0.0 && self.tasks_seen > 0
    }

    /// `c * sum Omega (theta - theta*)^2`.
    pub fn penalty(&self, theta: &[f64]) -> f64 {
        self.c
            * theta
                .iter()
                .zip(&self.theta_star)
                .zip(&self.big_omega)
                .map(|((t, s), o)| o * (t - s) * (t - s))
                .sum::<f64>()
    }

    /// Adds the penalty gradient `2 c Omega (theta - theta*)` into the
    /// extractor's gradient buffers.
    pub fn add_penalty_grad(&self, extractor: &mut FeatureExtractor) -> crate::Result<()> {
        let mut offset = 0;
        let mut result = Ok(());
        extractor.visit_params_mut(&mut |_, t| {
            let n = t.len();
            let g: Vec<f64> = (offset..offset + n)
                .map(|k| {
                    let theta = t.data()[k - offset];
                    2.0 * self.c * self.big_omega[k] * (theta - self.theta_star[k])
                })
                .collect();
            if result.is_ok() {
                result = t.accumulate_grad(&g);
            }
            offset += n;
        });
        result
    }

    /// Path-integral contribution of one optimizer step.
    pub fn accumulate(&mut self, task_grad: &[f64], before: &[f64], after: &[f64]) {
        for (((w, g), b), a) in self.omega.iter_mut().zip(task_grad).zip(before).zip(after) {
            *w -= g * (a - b);
        }
    }

    /// Folds the running path integral into `Omega` at a task boundary.
    pub fn consolidate(&mut self, theta: &[f64]) {
        for k in 0..theta.len() {
            let delta = theta[k] - self.theta_star[k];
            let denom = delta * delta + self.xi;
            debug_assert!(denom >= self.xi);
            self.big_omega[k] += self.omega[k].max(0.0) / denom;
            self.omega[k] = 0.0;
        }
        self.theta_star = theta.to_vec();
        self.tasks_seen += 1;
    }
}
