use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledDataset, Task, TaskStream};
use super::fewshot::fewshot_subsample;
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrder {
    #[default]
    Sorted,
    Shuffled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub fewshot_fraction: f64,
    pub class_order: ClassOrder,
    /// Drives the few-shot draw and, when shuffled, the class order.
    pub seed: u64,
}

impl Default for SplitOptions {
    fn default() -> Self {
        Self {
            fewshot_fraction: 0.1,
            class_order: ClassOrder::Sorted,
            seed: 0,
        }
    }
}

/// Partitions the classes into `num_tasks` consecutive groups and builds one
/// task per group. Test rows follow the same partition as training rows.
pub fn make_split_stream(
    train: &LabeledDataset,
    test: &LabeledDataset,
    num_tasks: usize,
    options: SplitOptions,
) -> Result<TaskStream> {
    let mut classes = train.class_set.clone();
    if num_tasks == 0 || !classes.len().is_multiple_of(num_tasks) {
        return Err(Error::Config(format!(
            "{} classes cannot be split evenly into {num_tasks} tasks",
            classes.len()
        )));
    }
    if let Some(c) = test.class_set.iter().find(|c| !classes.contains(c)) {
        return Err(Error::Data(format!("test class {c} absent from training data")));
    }
    if options.class_order == ClassOrder::Shuffled {
        classes.shuffle(&mut substream(options.seed, Stream::ClassOrder, 0));
    }
    let per_task = classes.len() / num_tasks;
    let train_by = train.indices_by_class();
    let test_by = test.indices_by_class();

    let mut tasks = Vec::with_capacity(num_tasks);
    for (task_id, group) in classes.chunks(per_task).enumerate() {
        let mut sorted = group.to_vec();
        sorted.sort_unstable();
        let label_map: BTreeMap<usize, usize> =
            sorted.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let rows = |by: &BTreeMap<usize, Vec<usize>>| -> Vec<usize> {
            let mut r: Vec<usize> = sorted.iter().flat_map(|c| by.get(c).cloned().unwrap_or_default()).collect();
            r.sort_unstable();
            r
        };
        let task_train = train
            .subset(&rows(&train_by))?
            .ok_or_else(|| Error::Data(format!("task {task_id} has no training rows")))?;
        let task_test = test
            .subset(&rows(&test_by))?
            .ok_or_else(|| Error::Data(format!("task {task_id} has no test rows")))?;
        let mut rng = substream(options.seed, Stream::FewShot, task_id as u64);
        let (fewshot, fewshot_indices) =
            fewshot_subsample(&task_train, options.fewshot_fraction, &mut rng)?;
        tasks.push(Task {
            task_id,
            label_map,
            train: task_train,
            fewshot,
            fewshot_indices,
            test: task_test,
        });
    }
    Ok(TaskStream { tasks })
}

impl TaskStream {
    /// Same tasks with every few-shot split redrawn at `fraction`.
    pub fn with_fewshot_fraction(&self, fraction: f64, seed: u64) -> Result<Self> {
        let mut out = self.clone();
        for task in &mut out.tasks {
            let mut rng = substream(seed, Stream::FewShot, task.task_id as u64);
            let (fs, idx) = fewshot_subsample(&task.train, fraction, &mut rng)?;
            task.fewshot = fs;
            task.fewshot_indices = idx;
        }
        Ok(out)
    }
}
