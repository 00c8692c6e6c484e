use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::Tensor;

/// Inputs with global class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    /// Sorted, deduplicated global class ids.
    pub class_set: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, _) = inputs.dims2()?;
        if n != labels.len() {
            return Err(Error::Data(format!("{n} inputs but {} labels", labels.len())));
        }
        if !inputs.is_finite() {
            return Err(Error::Data("non-finite input value".into()));
        }
        let mut class_set = labels.clone();
        class_set.sort_unstable();
        class_set.dedup();
        Ok(Self {
            inputs,
            labels,
            class_set,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Rows at `indices`, in the given order; `None` if `indices` is empty.
    pub fn subset(&self, indices: &[usize]) -> Result<Option<Self>> {
        if indices.is_empty() {
            return Ok(None);
        }
        let inputs = self.inputs.select_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(inputs, labels).map(Some)
    }

    /// Indices of each class, ascending, keyed by class id.
    pub fn indices_by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut by: BTreeMap<usize, Vec<usize>> =
            self.class_set.iter().map(|&c| (c, Vec::new())).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            by.entry(l).or_default().push(i);
        }
        by
    }
}

/// One task of the stream with its train / few-shot / test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    /// Global class id -> local label in `[0, C)`.
    pub label_map: BTreeMap<usize, usize>,
    pub train: LabeledDataset,
    pub fewshot: LabeledDataset,
    /// Rows of `train` that make up `fewshot`.
    pub fewshot_indices: Vec<usize>,
    pub test: LabeledDataset,
}

impl Task {
    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn local_labels(&self, ds: &LabeledDataset) -> Vec<usize> {
        ds.labels.iter().map(|l| self.label_map[l]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.tasks[0].train.dim()
    }

    pub fn classes_per_task(&self) -> usize {
        self.tasks[0].num_classes()
    }
}
