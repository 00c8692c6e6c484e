use rand::seq::index;
use rand::Rng;

use super::dataset::LabeledDataset;
use crate::error::{Error, Result};

/// `ceil(fraction * n)` clamped to `[1, n]`, ignoring floating noise in the
/// product (`0.1 * 30` is `3.0000000000000004`, which must count as 3).
pub fn stratum_count(fraction: f64, n: usize) -> usize {
    let exact = fraction * n as f64;
    let k = (exact - 1e-9 * exact.max(1.0)).ceil() as usize;
    k.clamp(1, n)
}

/// Stratified subsample: `ceil(fraction * n_c)` rows of every class, drawn
/// without replacement. Returns the subset and its row indices (ascending).
pub fn fewshot_subsample(
    train: &LabeledDataset,
    fraction: f64,
    rng: &mut impl Rng,
) -> Result<(LabeledDataset, Vec<usize>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("few-shot fraction {fraction} outside (0, 1]")));
    }
    let mut picked = Vec::new();
    for (class, rows) in train.indices_by_class() {
        if rows.is_empty() {
            return Err(Error::Data(format!("class {class} has no examples")));
        }
        let k = stratum_count(fraction, rows.len());
        picked.extend(index::sample(rng, rows.len(), k).into_iter().map(|i| rows[i]));
    }
    picked.sort_unstable();
    let subset = train
        .subset(&picked)?
        .ok_or_else(|| Error::Data("empty training set".into()))?;
    Ok((subset, picked))
}

/// Stratified train/validation split of row indices. Every class keeps at
/// least one training row; classes with a single row contribute no validation
/// row.
pub fn stratified_split(
    ds: &LabeledDataset,
    val_fraction: f64,
    rng: &mut impl Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for rows in ds.indices_by_class().into_values() {
        let n = rows.len();
        let n_val = ((val_fraction * n as f64).floor() as usize).min(n.saturating_sub(1));
        let chosen = index::sample(rng, n, n_val).into_vec();
        let mut is_val = vec![false; n];
        chosen.iter().for_each(|&i| is_val[i] = true);
        for (i, &r) in rows.iter().enumerate() {
            if is_val[i] {
                val.push(r);
            } else {
                train.push(r);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}
