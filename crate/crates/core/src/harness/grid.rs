use crate::error::{Error, Result};

/// Learning rates before batch-size scaling.
pub const BASE_LR_GRID: [f64; 6] = [0.003, 0.01, 0.03, 0.1, 0.3, 1.0];

/// The base grid scaled by `batch_size / 256`.
pub fn lr_grid(batch_size: usize) -> Result<Vec<f64>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let scale = batch_size as f64 / 256.0;
    Ok(BASE_LR_GRID.iter().map(|lr| lr * scale).collect())
}
