//! Regularization sweeps with validation selection.

use super::lbfgs::LbfgsOptions;
use super::logreg::{accuracy, fit_path, mean_log_loss, Fit, Problem};
use crate::error::Result;
use crate::Tensor;

/// Labeled features.
#[derive(Debug, Clone, Copy)]
pub struct Split<'a> {
    pub features: &'a Tensor,
    pub labels: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub fits: Vec<Fit>,
    pub val_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Index into `fits` of the chosen regularization.
    pub selected: usize,
}

impl SweepOutcome {
    pub fn chosen(&self) -> &Fit {
        &self.fits[self.selected]
    }
}

/// Index of the best candidate: highest accuracy, then lowest loss, then the
/// strongest regularization.
pub fn best_index(acc: &[f64], loss: &[f64], regs: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..acc.len() {
        let better = acc[i] > acc[best]
            || (acc[i] == acc[best]
                && (loss[i] < loss[best] || (loss[i] == loss[best] && regs[i] > regs[best])));
        if better {
            best = i;
        }
    }
    best
}

/// Fits `train` at every value of `grid` and scores each fit on `val`.
pub fn sweep(
    train: Split<'_>,
    val: Split<'_>,
    classes: usize,
    grid: &[f64],
    opts: LbfgsOptions,
) -> Result<SweepOutcome> {
    let problem = Problem::new(train.features, train.labels, classes)?;
    let fits = fit_path(&problem, grid, opts);
    let mut val_accuracy = Vec::with_capacity(fits.len());
    let mut val_loss = Vec::with_capacity(fits.len());
    for f in &fits {
        val_accuracy.push(accuracy(&f.classifier.predict(val.features)?, val.labels));
        val_loss.push(mean_log_loss(&f.classifier, val.features, val.labels)?);
    }
    let selected = best_index(&val_accuracy, &val_loss, grid);
    Ok(SweepOutcome {
        fits,
        val_accuracy,
        val_loss,
        selected,
    })
}
