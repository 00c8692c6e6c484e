//! Task streams: class-split tasks with train, few-shot and test splits.

mod dataset;
mod fewshot;
mod idx;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use dataset::{LabeledDataset, Task, TaskStream};
pub use fewshot::{fewshot_subsample, stratified_split, stratum_count};
pub use idx::{data_path, decode_idx, load_idx, IdxSpec, DATA_ENV, IMAGES_MAGIC, LABELS_MAGIC};
pub use split::{make_split_stream, ClassOrder, SplitOptions};
pub use synthetic::{make_synthetic_stream, SyntheticSpec};

use crate::error::Result;

/// Where a stream's data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx(IdxSpec),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn build(&self, fewshot_fraction: f64, seed: u64) -> Result<TaskStream> {
        match self {
            DataSource::Synthetic(spec) => make_synthetic_stream(spec, fewshot_fraction, seed),
            DataSource::Idx(spec) => spec.load(fewshot_fraction, seed),
        }
    }
}
