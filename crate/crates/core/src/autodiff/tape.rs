//! Reverse-mode tape.
//!
//! Ops are appended in execution order, so the node list is topologically
//! sorted by construction. `backward` consumes the tape: one backward sweep per
//! recorded loss.

use super::kernels::{gemm_acc, gemm_tn_acc, transpose};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    Square(Var),
    Sum(Var),
    Relu(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<S>,
    },
    Mse {
        x: Var,
        diff: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<()> {
    if t.data().iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        let mut value = value;
        value.grad = None;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, value: Tensor<S>, op: Op<S>, name: &'static str) -> Result<Var> {
        check_finite(&value, name)?;
        let requires_grad = self.inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn inputs(&self, op: &Op<S>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::AddRow(a, b) | Op::Add(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Square(x) | Op::Sum(x) | Op::Relu(x) => vec![*x],
            Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Mse { x, .. } => vec![*x],
        }
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable leaf; `backward` reports its gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2()?;
        let (k2, n) = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} * {k2}x{n}"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked(out, Op::MatMul(a, b), "matmul")
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        let b = self.value(bias).data();
        if b.len() != n {
            return Err(Error::Dimension(format!(
                "row bias of length {} for {m}x{n} input",
                b.len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(b).for_each(|(o, &bv)| *o += bv);
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked(out, Op::AddRow(x, bias), "add_row")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Dimension(format!(
                "add of shapes {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push_checked(out, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * c).collect())?;
        self.push_checked(out, Op::Scale(x, c), "scale")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v * v).collect())?;
        self.push_checked(out, Op::Square(x), "square")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push_checked(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v > S::zero() { v } else { S::zero() })
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push_checked(out, Op::Relu(x), "relu")
    }

    /// Per-row group normalization of a `batch x features` matrix followed by a
    /// per-feature affine map.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: S) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if groups == 0 || n % groups != 0 {
            return Err(Error::Config(format!(
                "{n} features cannot be split into {groups} groups"
            )));
        }
        if !(eps > S::zero()) {
            return Err(Error::Config("group_norm eps must be positive".into()));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        if g.len() != n || b.len() != n {
            return Err(Error::Dimension(format!(
                "group_norm affine parameters must have {n} entries"
            )));
        }
        let size = n / groups;
        let inv_size = S::one() / S::of(size as f64);
        let xs = self.value(x).data();
        let mut xhat = vec![S::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m * groups);
        let mut out = vec![S::zero(); m * n];
        for r in 0..m {
            for grp in 0..groups {
                let lo = r * n + grp * size;
                let seg = &xs[lo..lo + size];
                let mean = seg.iter().copied().sum::<S>() * inv_size;
                let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_size;
                let inv = S::one() / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..size {
                    let h = (seg[j] - mean) * inv;
                    let f = grp * size + j;
                    xhat[lo + j] = h;
                    out[lo + j] = g[f] * h + b[f];
                }
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push_checked(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            "group_norm",
        )
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.value(logits).dims2()?;
        if labels.len() != m {
            return Err(Error::Dimension(format!(
                "{} labels for {m} rows of logits",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!("label {bad} outside [0, {c})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![S::zero(); m * c];
        let mut total = S::zero();
        for (r, &label) in labels.iter().enumerate() {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut denom = S::zero();
            for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp();
                denom += *p;
            }
            probs[r * c..(r + 1) * c].iter_mut().for_each(|p| *p /= denom);
            total += denom.ln() - (row[label] - max);
        }
        let loss = Tensor::scalar(total / S::of(m as f64));
        self.push_checked(
            loss,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
        )
    }

    /// Mean squared difference against a fixed target.
    pub fn mse(&mut self, x: Var, target: &Tensor<S>) -> Result<Var> {
        let t = self.value(x);
        if t.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mse of shapes {:?} and {:?}",
                t.shape(),
                target.shape()
            )));
        }
        let diff: Vec<S> = t.data().iter().zip(target.data()).map(|(&a, &b)| a - b).collect();
        let loss = diff.iter().map(|&d| d * d).sum::<S>() / S::of(diff.len() as f64);
        self.push_checked(Tensor::scalar(loss), Op::Mse { x, diff }, "mse")
    }

    /// Propagates `d loss / d node` back through the tape and returns the
    /// gradients of every trainable leaf reachable from `loss`.
    pub fn backward(self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage(
                "backward on a value that no trainable parameter feeds into".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.backward_op(&node.op, &node.value, &gout, &mut grads)?;
        }

        let mut leaves = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                let g = grads[id].take().unwrap_or_else(|| vec![S::zero(); node.value.len()]);
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                leaves.push((Var(id), g));
            }
        }
        Ok(Gradients { leaves })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, g: Vec<S>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(b, &x)| *b += x),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_op(
        &self,
        op: &Op<S>,
        out: &Tensor<S>,
        gout: &[S],
        grads: &mut [Option<Vec<S>>],
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.requires_grad(*a) {
                    // dA = dC * B^T
                    let bt = transpose(self.value(*b).data(), k, n);
                    let mut da = vec![S::zero(); m * k];
                    gemm_acc(gout, &bt, &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.requires_grad(*b) {
                    // dB = A^T * dC
                    let mut db = vec![S::zero(); k * n];
                    gemm_tn_acc(self.value(*a).data(), gout, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::AddRow(x, bias) => {
                let (_, n) = out.dims2()?;
                self.accumulate(grads, *x, gout.to_vec());
                if self.requires_grad(*bias) {
                    let mut db = vec![S::zero(); n];
                    for row in gout.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.to_vec());
                self.accumulate(grads, *b, gout.to_vec());
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, gout.iter().map(|&g| g * *c).collect());
            }
            Op::Square(x) => {
                let xs = self.value(*x).data();
                let two = S::of(2.0);
                self.accumulate(grads, *x, gout.iter().zip(xs).map(|(&g, &v)| two * v * g).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gout[0]; n]);
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                let g = gout
                    .iter()
                    .zip(xs)
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                self.accumulate(grads, *x, g);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let (m, n) = out.dims2()?;
                let size = n / groups;
                let gam = self.value(*gamma).data();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dgamma = vec![S::zero(); n];
                    let mut dbeta = vec![S::zero(); n];
                    for (grow, hrow) in gout.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for f in 0..n {
                            dgamma[f] += grow[f] * hrow[f];
                            dbeta[f] += grow[f];
                        }
                    }
                    self.accumulate(grads, *gamma, dgamma);
                    self.accumulate(grads, *beta, dbeta);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![S::zero(); m * n];
                    let size_s = S::of(size as f64);
                    let mut dxhat = vec![S::zero(); size];
                    for r in 0..m {
                        for grp in 0..*groups {
                            let lo = r * n + grp * size;
                            let mut sum_d = S::zero();
                            let mut sum_dh = S::zero();
                            for j in 0..size {
                                let d = gout[lo + j] * gam[grp * size + j];
                                dxhat[j] = d;
                                sum_d += d;
                                sum_dh += d * xhat[lo + j];
                            }
                            let inv = inv_std[r * groups + grp];
                            for j in 0..size {
                                dx[lo + j] = inv / size_s
                                    * (size_s * dxhat[j] - sum_d - xhat[lo + j] * sum_dh);
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (m, c) = self.value(*logits).dims2()?;
                let scale = gout[0] / S::of(m as f64);
                let mut d = probs.clone();
                for (r, &label) in labels.iter().enumerate() {
                    d[r * c + label] -= S::one();
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, *logits, d);
            }
            Op::Mse { x, diff } => {
                let scale = S::of(2.0) * gout[0] / S::of(diff.len() as f64);
                self.accumulate(grads, *x, diff.iter().map(|&d| d * scale).collect());
            }
        }
        Ok(())
    }
}

/// Gradients of the trainable leaves of a consumed tape.
pub struct Gradients<S> {
    leaves: Vec<(Var, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.leaves
            .iter()
            .find(|(id, _)| *id == v)
            .map(|(_, g)| g.as_slice())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        let pos = self.leaves.iter().position(|(id, _)| *id == v)?;
        Some(self.leaves.swap_remove(pos).1)
    }

    /// Writes the gradient of `v` into `target.grad`, accumulating.
    pub fn write_into(&mut self, v: Var, target: &mut Tensor<S>) -> Result<()> {
        match self.take(v) {
            Some(g) => target.accumulate_grad(&g),
            None => Err(Error::Usage("variable is not a trainable leaf of this tape".into())),
        }
    }
}
