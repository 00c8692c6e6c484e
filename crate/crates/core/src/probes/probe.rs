use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::knn::knn_predict;
use super::lbfgs::LbfgsOptions;
use super::logreg::{accuracy, default_reg_grid};
use super::select::{sweep, Split};
use crate::data::{stratified_split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::{FeatureExtractor, Model, Tensor};

/// Declaration order is the tie-break order of [`best_probe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Knn,
    Linear,
    Lpft,
}

impl ProbeKind {
    pub const ALL: [ProbeKind; 3] = [ProbeKind::Knn, ProbeKind::Linear, ProbeKind::Lpft];

    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Knn => "knn",
            ProbeKind::Linear => "linear",
            ProbeKind::Lpft => "lpft",
        }
    }
}

impl std::fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub kind: ProbeKind,
    #[serde(default = "default_knn_k")]
    pub knn_k: usize,
    #[serde(default = "default_knn_temperature")]
    pub knn_temperature: f64,
    #[serde(default = "default_reg_grid")]
    pub reg_grid: Vec<f64>,
    #[serde(default = "default_probe_epochs")]
    pub lp_epochs: usize,
    #[serde(default = "default_probe_epochs")]
    pub ft_epochs: usize,
    /// Learning rates for the LP-FT probe; defaults to the training grid
    /// rule at `batch_size`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_grid: Option<Vec<f64>>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    /// Share of each few-shot class held out for hyperparameter selection.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    /// Also report the accuracy of the test-selected hyperparameter.
    #[serde(default)]
    pub report_test_selected: bool,
    /// Overrides the run seed for this probe's splits and head init.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_knn_k() -> usize {
    200
}
fn default_knn_temperature() -> f64 {
    0.1
}
fn default_probe_epochs() -> usize {
    25
}
fn default_batch_size() -> usize {
    32
}
fn default_momentum() -> f64 {
    0.9
}
fn default_val_fraction() -> f64 {
    0.2
}

impl ProbeConfig {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            knn_k: default_knn_k(),
            knn_temperature: default_knn_temperature(),
            reg_grid: default_reg_grid(),
            lp_epochs: default_probe_epochs(),
            ft_epochs: default_probe_epochs(),
            lr_grid: None,
            batch_size: default_batch_size(),
            momentum: default_momentum(),
            val_fraction: default_val_fraction(),
            report_test_selected: false,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{} probe: {m}", self.kind)));
        if self.knn_k == 0 {
            return bad("knn_k must be at least 1");
        }
        if !(self.knn_temperature > 0.0) {
            return bad("knn_temperature must be positive");
        }
        if self.reg_grid.is_empty() || self.reg_grid.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("reg_grid must be nonempty and positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if let Some(g) = &self.lr_grid {
            if g.is_empty() || g.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                return bad("lr_grid must be nonempty and non-negative");
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn lr_grid(&self) -> Result<Vec<f64>> {
        match &self.lr_grid {
            Some(g) => Ok(g.clone()),
            None => crate::harness::lr_grid(self.batch_size),
        }
    }

    pub fn effective_seed(&self, run_seed: u64) -> u64 {
        self.seed.unwrap_or(run_seed)
    }
}

/// Head-only phase evidence from one LP-FT probe fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeLpAudit {
    pub lr: f64,
    pub theta_unchanged: bool,
    pub lp_final_loss: f64,
    pub joint_initial_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub task: usize,
    pub accuracy: f64,
    /// k for kNN, regularization strength for linear, learning rate for LP-FT.
    pub hyperparam: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_selected_accuracy: Option<f64>,
    /// Digest of the adapted extractor and head (LP-FT only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapted_digest: Option<String>,
    /// Grid points that diverged (LP-FT only).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failed_hyperparams: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lp_audits: Vec<ProbeLpAudit>,
}

/// One hyperparameter shared by every task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalSelection {
    pub hyperparam: f64,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub probe: ProbeKind,
    pub per_task: Vec<TaskScore>,
    pub average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_selected_average: Option<f64>,
    /// LP-FT only: the aggregate under a single learning rate for all tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<GlobalSelection>,
}

impl ProbeResult {
    pub(crate) fn from_scores(probe: ProbeKind, per_task: Vec<TaskScore>, report_test_selected: bool) -> Self {
        let n = per_task.len() as f64;
        let average = per_task.iter().map(|s| s.accuracy).sum::<f64>() / n;
        let test_selected_average = report_test_selected.then(|| {
            per_task
                .iter()
                .map(|s| s.test_selected_accuracy.unwrap_or(s.accuracy))
                .sum::<f64>()
                / n
        });
        Self {
            probe,
            per_task,
            average,
            test_selected_average,
            global: None,
        }
    }
}

/// Highest average wins; ties go to the cheaper probe (knn, linear, lpft).
pub fn best_probe(results: &[ProbeResult]) -> Result<&ProbeResult> {
    results
        .iter()
        .reduce(|best, r| {
            if r.average > best.average || (r.average == best.average && r.probe < best.probe) {
                r
            } else {
                best
            }
        })
        .ok_or_else(|| Error::Usage("best probe of an empty result set".into()))
}

pub(crate) fn check_stream(model: &Model, stream: &TaskStream) -> Result<()> {
    if stream.is_empty() {
        return Err(Error::Data("no tasks to probe".into()));
    }
    if let Some(t) = stream.tasks.iter().find(|t| t.fewshot.is_empty()) {
        return Err(Error::Data(format!("task {} has an empty few-shot set", t.task_id)));
    }
    if stream.input_dim() != model.config.input_dim {
        return Err(Error::Config("stream and model input widths differ".into()));
    }
    Ok(())
}

/// Few-shot rows split into selection-train and validation indices; falls
/// back to validating on the training rows when no class can spare one.
pub(crate) fn fewshot_split(task: &Task, cfg: &ProbeConfig, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = substream(seed, Stream::ProbeSplit, task.task_id as u64);
    let (tr, va) = stratified_split(&task.fewshot, cfg.val_fraction, &mut rng);
    let va = if va.is_empty() { tr.clone() } else { va };
    (tr, va)
}

fn knn_task(extractor: &FeatureExtractor, task: &Task, cfg: &ProbeConfig) -> Result<TaskScore> {
    let refs = extractor.features(&task.fewshot.inputs)?;
    let queries = extractor.features(&task.test.inputs)?;
    let k = cfg.knn_k.min(task.fewshot.len());
    let pred = knn_predict(
        &refs,
        &task.local_labels(&task.fewshot),
        task.num_classes(),
        &queries,
        k,
        cfg.knn_temperature,
    )?;
    let acc = accuracy(&pred, &task.local_labels(&task.test));
    Ok(TaskScore {
        task: task.task_id,
        accuracy: acc,
        hyperparam: k as f64,
        test_selected_accuracy: cfg.report_test_selected.then_some(acc),
        adapted_digest: None,
        failed_hyperparams: vec![],
        lp_audits: vec![],
    })
}

fn linear_task(extractor: &FeatureExtractor, task: &Task, cfg: &ProbeConfig, seed: u64) -> Result<TaskScore> {
    let (tr, va) = fewshot_split(task, cfg, seed);
    let feats = extractor.features(&task.fewshot.inputs)?;
    let labels = task.local_labels(&task.fewshot);
    let take = |rows: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        Ok((feats.select_rows(rows)?, rows.iter().map(|&i| labels[i]).collect()))
    };
    let (ftr, ytr) = take(&tr)?;
    let (fva, yva) = take(&va)?;
    let outcome = sweep(
        Split { features: &ftr, labels: &ytr },
        Split { features: &fva, labels: &yva },
        task.num_classes(),
        &cfg.reg_grid,
        LbfgsOptions::default(),
    )?;
    let test_feats = extractor.features(&task.test.inputs)?;
    let test_labels = task.local_labels(&task.test);
    let test_acc = |i: usize| -> Result<f64> {
        Ok(accuracy(&outcome.fits[i].classifier.predict(&test_feats)?, &test_labels))
    };
    let accuracy = test_acc(outcome.selected)?;
    let test_selected_accuracy = if cfg.report_test_selected {
        let mut best = accuracy;
        for i in 0..outcome.fits.len() {
            best = best.max(test_acc(i)?);
        }
        Some(best)
    } else {
        None
    };
    Ok(TaskScore {
        task: task.task_id,
        accuracy,
        hyperparam: outcome.chosen().reg,
        test_selected_accuracy,
        adapted_digest: None,
        failed_hyperparams: vec![],
        lp_audits: vec![],
    })
}

fn per_task<F>(stream: &TaskStream, f: F) -> Result<Vec<TaskScore>>
where
    F: Fn(&Task) -> Result<TaskScore> + Sync + Send,
{
    stream.tasks.par_iter().map(f).collect()
}

/// kNN probe over every task's few-shot set.
pub fn knn_probe(model: &Model, stream: &TaskStream, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    check_stream(model, stream)?;
    let scores = per_task(stream, |t| knn_task(&model.extractor, t, cfg))?;
    Ok(ProbeResult::from_scores(ProbeKind::Knn, scores, cfg.report_test_selected))
}

/// Logistic-regression probe with the regularization chosen on a held-out
/// share of each few-shot set.
pub fn linear_probe(model: &Model, stream: &TaskStream, cfg: &ProbeConfig, run_seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    check_stream(model, stream)?;
    let seed = cfg.effective_seed(run_seed);
    let scores = per_task(stream, |t| linear_task(&model.extractor, t, cfg, seed))?;
    Ok(ProbeResult::from_scores(ProbeKind::Linear, scores, cfg.report_test_selected))
}

/// Dispatches on `cfg.kind`.
pub fn run_probe(model: &Model, stream: &TaskStream, cfg: &ProbeConfig, run_seed: u64) -> Result<ProbeResult> {
    match cfg.kind {
        ProbeKind::Knn => knn_probe(model, stream, cfg),
        ProbeKind::Linear => linear_probe(model, stream, cfg, run_seed),
        ProbeKind::Lpft => super::lpft::lpft_probe(model, stream, cfg, run_seed),
    }
}
