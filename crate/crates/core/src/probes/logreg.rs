//! L2-regularized multinomial logistic regression on fixed features.
//!
//! Objective: `(1/n) sum_i CE(z_i W + b, y_i) + (reg / 2) ||W||^2`, bias
//! unregularized.

use super::lbfgs::{minimize, LbfgsOptions};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::models::argmax_rows;
use crate::Head;

/// `reg_grid` default: `count` values evenly spaced in log10 between `lo` and
/// `hi`, both endpoints included exactly.
pub fn logspace(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => vec![],
        1 => vec![lo],
        _ => {
            let (a, b) = (lo.log10(), hi.log10());
            let mut v: Vec<f64> = (0..count)
                .map(|i| 10f64.powf(a + (b - a) * i as f64 / (count - 1) as f64))
                .collect();
            v[0] = lo;
            v[count - 1] = hi;
            v
        }
    }
}

/// 100 regularization strengths spanning `[1e-7, 1e2]`.
pub fn default_reg_grid() -> Vec<f64> {
    logspace(1e-7, 1e2, 100)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    /// `features x classes`, row-major.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub features: usize,
    pub classes: usize,
}

impl LinearClassifier {
    pub fn zeros(features: usize, classes: usize) -> Self {
        Self {
            weight: vec![0.0; features * classes],
            bias: vec![0.0; classes],
            features,
            classes,
        }
    }

    fn pack(&self) -> Vec<f64> {
        let mut v = self.weight.clone();
        v.extend_from_slice(&self.bias);
        v
    }

    fn unpack(features: usize, classes: usize, v: &[f64]) -> Self {
        let split = features * classes;
        Self {
            weight: v[..split].to_vec(),
            bias: v[split..].to_vec(),
            features,
            classes,
        }
    }

    pub fn weight_norm(&self) -> f64 {
        self.weight.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn logits(&self, feats: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.to_head(0).logits(feats)
    }

    pub fn predict(&self, feats: &Tensor<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(feats)?))
    }

    pub fn to_head(&self, task_id: usize) -> Head {
        Head {
            task_id,
            weight: Tensor::new(vec![self.features, self.classes], self.weight.clone())
                .expect("classifier shape"),
            bias: Tensor::new(vec![self.classes], self.bias.clone()).expect("classifier shape"),
        }
    }
}

/// Training problem: features `n x k`, labels in `[0, classes)`.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub features: &'a Tensor<f64>,
    pub labels: &'a [usize],
    pub classes: usize,
}

impl<'a> Problem<'a> {
    pub fn new(features: &'a Tensor<f64>, labels: &'a [usize], classes: usize) -> Result<Self> {
        let (n, _) = features.dims2()?;
        if n != labels.len() || n == 0 {
            return Err(Error::Data(format!(
                "{n} feature rows but {} labels",
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Data("label outside the class range".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    /// Objective value; writes its gradient into `grad` (packed `[W, b]`).
    pub fn objective(&self, reg: f64, params: &[f64], grad: &mut [f64]) -> f64 {
        let (n, k) = (self.labels.len(), self.dim());
        let c = self.classes;
        let (w, b) = params.split_at(k * c);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let (gw, gb) = grad.split_at_mut(k * c);
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut z = vec![0.0; c];
        for (i, &y) in self.labels.iter().enumerate() {
            let x = self.features.row(i);
            z.copy_from_slice(b);
            for (&xv, wrow) in x.iter().zip(w.chunks_exact(c)) {
                z.iter_mut().zip(wrow).for_each(|(zj, &wj)| *zj += xv * wj);
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = z.iter().map(|v| (v - max).exp()).sum();
            loss += denom.ln() + max - z[y];
            for j in 0..c {
                let p = (z[j] - max).exp() / denom;
                z[j] = (p - if j == y { 1.0 } else { 0.0 }) * inv_n;
            }
            for (&xv, grow) in x.iter().zip(gw.chunks_exact_mut(c)) {
                grow.iter_mut().zip(&z).for_each(|(g, &d)| *g += xv * d);
            }
            gb.iter_mut().zip(&z).for_each(|(g, &d)| *g += d);
        }
        let mut penalty = 0.0;
        for (g, &wv) in gw.iter_mut().zip(w) {
            *g += reg * wv;
            penalty += wv * wv;
        }
        loss * inv_n + 0.5 * reg * penalty
    }

    pub fn objective_at(&self, reg: f64, clf: &LinearClassifier) -> f64 {
        let mut g = vec![0.0; clf.weight.len() + clf.bias.len()];
        self.objective(reg, &clf.pack(), &mut g)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub classifier: LinearClassifier,
    pub reg: f64,
    pub objective: f64,
    pub grad_inf_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Full-batch L-BFGS fit. Starts from `warm` when given and no worse than
/// the zero classifier, else from zero.
pub fn fit(
    problem: &Problem<'_>,
    reg: f64,
    warm: Option<&LinearClassifier>,
    opts: LbfgsOptions,
) -> Fit {
    let (k, c) = (problem.dim(), problem.classes);
    let zero = LinearClassifier::zeros(k, c);
    let start = match warm {
        Some(w) if problem.objective_at(reg, w) <= problem.objective_at(reg, &zero) => w.pack(),
        _ => zero.pack(),
    };
    let r = minimize(|p, g| problem.objective(reg, p, g), start, opts);
    Fit {
        classifier: LinearClassifier::unpack(k, c, &r.x),
        reg,
        objective: r.value,
        grad_inf_norm: r.grad_inf_norm,
        iterations: r.iterations,
        converged: r.converged,
    }
}

/// Fits every value of `grid`, strongest regularization first with warm
/// starts. Results come back in `grid` order.
pub fn fit_path(problem: &Problem<'_>, grid: &[f64], opts: LbfgsOptions) -> Vec<Fit> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));
    let mut out: Vec<Option<Fit>> = vec![None; grid.len()];
    let mut warm: Option<LinearClassifier> = None;
    for i in order {
        let f = fit(problem, grid[i], warm.as_ref(), opts);
        warm = Some(f.classifier.clone());
        out[i] = Some(f);
    }
    out.into_iter().map(|f| f.expect("every grid point fitted")).collect()
}

/// Fraction of correct predictions.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}

/// Mean cross-entropy of a classifier, unregularized.
pub fn mean_log_loss(clf: &LinearClassifier, feats: &Tensor<f64>, labels: &[usize]) -> Result<f64> {
    let problem = Problem::new(feats, labels, clf.classes)?;
    Ok(problem.objective_at(0.0, clf))
}
