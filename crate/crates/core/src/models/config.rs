use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Epsilon inside the group-norm variance.
pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_groups: usize,
    pub classes_per_task: usize,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 64,
            hidden_dims: vec![256, 128],
            feature_dim: 64,
            num_groups: 8,
            classes_per_task: 2,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.classes_per_task == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.num_groups == 0 {
            return Err(Error::Config("num_groups must be positive".into()));
        }
        for &h in &self.hidden_dims {
            if h == 0 || h % self.num_groups != 0 {
                return Err(Error::Config(format!(
                    "hidden width {h} is not a positive multiple of num_groups {}",
                    self.num_groups
                )));
            }
        }
        Ok(())
    }

    /// Number of feature-extractor parameters implied by the layer shapes.
    pub fn extractor_param_count(&self) -> usize {
        let mut fan_in = self.input_dim;
        let mut total = 0;
        for &h in &self.hidden_dims {
            total += fan_in * h + 3 * h;
            fan_in = h;
        }
        total + fan_in * self.feature_dim + self.feature_dim
    }

    pub fn head_param_count(&self) -> usize {
        self.feature_dim * self.classes_per_task + self.classes_per_task
    }
}
