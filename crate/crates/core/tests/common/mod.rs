//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use contilearn::autodiff::Var;
use contilearn::{Result, Tape, Tensor};

pub const FD_EPS: f64 = 1e-5;

/// Relative error with an absolute floor so near-zero gradients compare by
/// absolute difference. The floor grows with the loss magnitude because
/// central differences carry roundoff of order `eps_machine * |loss| / FD_EPS`.
pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * loss.abs().max(1.0))
}

/// Max relative error between tape gradients of `loss` and central finite
/// differences, over every entry of every input tensor.
pub fn gradcheck<F>(inputs: &[Tensor], loss: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = loss(&mut tape, &vars).expect("forward");
    let value = tape.value(out).data()[0];
    let mut grads = tape.backward(out).expect("backward");
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| grads.take(v).expect("grad")).collect();

    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = loss(&mut tape, &vars).expect("forward");
        tape.value(out).data()[0]
    };

    let mut worst = 0.0f64;
    let mut vals = inputs.to_vec();
    for (p, g) in analytic.iter().enumerate() {
        for i in 0..vals[p].len() {
            let orig = vals[p].data()[i];
            vals[p].data_mut()[i] = orig + FD_EPS;
            let up = eval(&vals);
            vals[p].data_mut()[i] = orig - FD_EPS;
            let down = eval(&vals);
            vals[p].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(rel_err(g[i], numeric, value));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl rand::Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap()
}

/// Exhaustive all-pairs vote, written without normalizing the rows first.
pub fn brute_force_knn(refs: &Tensor, labels: &[usize], classes: usize, queries: &Tensor, k: usize, temp: f64) -> Vec<usize> {
    let d = refs.shape()[1];
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cosine = |a: &[f64], b: &[f64]| {
        let (na, nb) = (norm(a), norm(b));
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum::<f64>()
        }
    };
    (0..queries.shape()[0])
        .map(|q| {
            let query = &queries.data()[q * d..(q + 1) * d];
            let mut all: Vec<(f64, usize)> = (0..refs.shape()[0])
                .map(|j| (cosine(query, &refs.data()[j * d..(j + 1) * d]), j))
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let mut votes = vec![0.0; classes];
            for &(s, j) in all.iter().take(k) {
                votes[labels[j]] += (s / temp).exp();
            }
            let max = votes.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            votes.iter().position(|&v| v == max).unwrap()
        })
        .collect()
}

/// Independent objective and plain gradient descent for the same problem.
pub fn gd_oracle(feats: &[Vec<f64>], labels: &[usize], classes: usize, reg: f64, iters: usize, step: f64) -> f64 {
    let d = feats[0].len();
    let n = feats.len() as f64;
    let mut w = vec![vec![0.0; classes]; d];
    let mut b = vec![0.0; classes];
    let objective = |w: &[Vec<f64>], b: &[f64], grad: Option<(&mut Vec<Vec<f64>>, &mut Vec<f64>)>| {
        let mut loss = 0.0;
        let mut gw = vec![vec![0.0; classes]; d];
        let mut gb = vec![0.0; classes];
        for (x, &y) in feats.iter().zip(labels) {
            let z: Vec<f64> = (0..classes).map(|c| b[c] + (0..d).map(|i| x[i] * w[i][c]).sum::<f64>()).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            loss += lse - z[y];
            for c in 0..classes {
                let p = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                gb[c] += p / n;
                for i in 0..d {
                    gw[i][c] += x[i] * p / n;
                }
            }
        }
        let sq: f64 = w.iter().flatten().map(|v| v * v).sum();
        if let Some((ow, ob)) = grad {
            for i in 0..d {
                for c in 0..classes {
                    ow[i][c] = gw[i][c] + reg * w[i][c];
                }
            }
            *ob = gb;
        }
        loss / n + 0.5 * reg * sq
    };
    let mut gw = vec![vec![0.0; classes]; d];
    let mut gb = vec![0.0; classes];
    for _ in 0..iters {
        objective(&w, &b, Some((&mut gw, &mut gb)));
        for i in 0..d {
            for c in 0..classes {
                w[i][c] -= step * gw[i][c];
            }
        }
        for c in 0..classes {
            b[c] -= step * gb[c];
        }
    }
    objective(&w, &b, None)
}

/// Finite-difference check of the full MLP cross-entropy loss with respect to
/// every parameter, the layers wired by hand as in `FeatureExtractor::forward`.
pub fn mlp_gradcheck(seed: u64) -> f64 {
    use contilearn::autodiff::ParamSet;
    use contilearn::models::{init_model, ModelConfig};
    use rand::{Rng, SeedableRng};

    let cfg = ModelConfig {
        input_dim: 6,
        hidden_dims: vec![8, 4],
        feature_dim: 3,
        num_groups: 2,
        classes_per_task: 3,
        init_seed: seed,
    };
    let mut model = init_model::<f64>(&cfg).unwrap();
    model.add_head(0);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let x = random_tensor(&mut rng, &[5, 6], 1.5);
    let labels: Vec<usize> = (0..5).map(|_| rng.random_range(0..3)).collect();
    let mut params = Vec::new();
    model.visit_params(&mut |_, t| params.push(t.clone()));

    gradcheck(&params, |tape, v| {
        let mut h = tape.constant(x.clone());
        for layer in 0..2 {
            let [w, b, g, beta] = [v[4 * layer], v[4 * layer + 1], v[4 * layer + 2], v[4 * layer + 3]];
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            let z = tape.group_norm(z, 2, g, beta, 1e-5)?;
            h = tape.relu(z)?;
        }
        let z = tape.matmul(h, v[8])?;
        let f = tape.add_row(z, v[9])?;
        let o = tape.matmul(f, v[10])?;
        let o = tape.add_row(o, v[11])?;
        tape.cross_entropy(o, &labels)
    })
}
