//! Weighted cosine-similarity nearest-neighbor classifier.

use crate::error::{Error, Result};
use crate::Tensor;

/// Rows scaled to unit L2 norm; zero rows stay zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(d.max(1)).take(n) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            row.iter_mut().for_each(|v| *v /= norm);
        }
    }
    Tensor::new(vec![n, d], out)
}

/// Predicts a class for every row of `queries`.
///
/// The `k` most similar references (cosine similarity, ties to the lower
/// reference index) vote with weight `exp(sim / temperature)`; the class with
/// the largest total wins, ties to the lowest class index.
pub fn knn_predict(
    references: &Tensor,
    labels: &[usize],
    classes: usize,
    queries: &Tensor,
    k: usize,
    temperature: f64,
) -> Result<Vec<usize>> {
    let (n, d) = references.dims2()?;
    if n == 0 || labels.len() != n {
        return Err(Error::Data("kNN needs a nonempty, fully labeled reference set".into()));
    }
    if queries.dims2()?.1 != d {
        return Err(Error::Dimension(format!(
            "queries have {} columns, references {d}",
            queries.dims2()?.1
        )));
    }
    if k == 0 || !(temperature > 0.0) {
        return Err(Error::Config("kNN needs k >= 1 and a positive temperature".into()));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Data("reference label outside the class range".into()));
    }
    let k = k.min(n);
    let refs = l2_normalize(references)?;
    let qs = l2_normalize(queries)?;
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(n);
    let mut votes = vec![0.0; classes];
    let mut out = Vec::with_capacity(qs.shape()[0]);
    for q in qs.data().chunks_exact(d.max(1)) {
        sims.clear();
        sims.extend(
            refs.data()
                .chunks_exact(d.max(1))
                .enumerate()
                .map(|(j, r)| (q.iter().zip(r).map(|(a, b)| a * b).sum::<f64>(), j)),
        );
        let by_rank = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        if k < n {
            sims.select_nth_unstable_by(k - 1, by_rank);
        }
        let top = &mut sims[..k];
        top.sort_unstable_by(by_rank);
        votes.iter_mut().for_each(|v| *v = 0.0);
        for &(s, j) in top.iter() {
            votes[labels[j]] += (s / temperature).exp();
        }
        let mut best = 0;
        for c in 1..classes {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}
