//! LP-FT probe: fit a fresh head on frozen features, then fine-tune a private
//! copy of the extractor together with it, once per learning rate.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::logreg::accuracy;
use super::probe::{check_stream, fewshot_split, GlobalSelection, ProbeConfig, ProbeKind, ProbeLpAudit, ProbeResult, TaskScore};
use crate::autodiff::SgdConfig;
use crate::data::Task;
use crate::error::{Error, Result};
use crate::models::{argmax_rows, param_digest};
use crate::rng::{substream, Stream};
use crate::trainers::{head_loss, head_phase, joint_loss, joint_phase, Aux};
use crate::{Head, Model, Tensor};

struct LrOutcome {
    lr: f64,
    val_accuracy: f64,
    val_loss: f64,
    test_accuracy: f64,
    digest: String,
    audit: ProbeLpAudit,
}

fn fit_one(base: &Model, task: &Task, cfg: &ProbeConfig, seed: u64, lr: f64, split: &Split) -> Result<LrOutcome> {
    let task_id = task.task_id;
    let sgd = SgdConfig {
        learning_rate: lr,
        momentum: cfg.momentum,
        weight_decay: 0.0,
        batch_size: cfg.batch_size,
    };
    let mut model = Model {
        config: base.config.clone(),
        extractor: base.extractor.clone(),
        heads: BTreeMap::new(),
    };
    let mut head_rng = substream(seed, Stream::ProbeHead, task_id as u64);
    let mut head = Head::init(
        model.config.feature_dim,
        task.num_classes(),
        task_id,
        &mut head_rng,
    );
    let before = param_digest(&model.extractor);
    let feats = model.extractor.features(&split.train_x)?;
    let mut rng = substream(seed, Stream::ProbeShuffle, task_id as u64 * 2 + 1);
    head_phase(&mut head, &feats, &split.train_y, &sgd, cfg.lp_epochs, &mut rng, |_, _, _| Ok(()))?;
    let lp_final_loss = head_loss(&head, &feats, &split.train_y)?;
    let theta_unchanged = param_digest(&model.extractor) == before;
    model.heads.insert(task_id, head);
    let joint_initial_loss = joint_loss(&model, task_id, &split.train_x, &split.train_y)?;

    let mut rng = substream(seed, Stream::ProbeShuffle, task_id as u64 * 2);
    joint_phase(
        &mut model,
        task_id,
        &split.train_x,
        &split.train_y,
        &sgd,
        cfg.ft_epochs,
        &mut rng,
        &mut Aux::Plain,
        |_, _, _| Ok(()),
    )?;
    let val_accuracy = accuracy(&argmax_rows(&model.predict(task_id, &split.val_x)?), &split.val_y);
    let val_loss = joint_loss(&model, task_id, &split.val_x, &split.val_y)?;
    let test_accuracy = accuracy(
        &argmax_rows(&model.predict(task_id, &task.test.inputs)?),
        &task.local_labels(&task.test),
    );
    Ok(LrOutcome {
        lr,
        val_accuracy,
        val_loss,
        test_accuracy,
        digest: param_digest(&model),
        audit: ProbeLpAudit {
            lr,
            theta_unchanged,
            lp_final_loss,
            joint_initial_loss,
        },
    })
}

struct Split {
    train_x: Tensor,
    train_y: Vec<usize>,
    val_x: Tensor,
    val_y: Vec<usize>,
}

/// Best by validation accuracy, then validation loss, then the smaller rate.
fn better(a: (f64, f64, f64), b: (f64, f64, f64)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && (a.1 < b.1 || (a.1 == b.1 && a.2 < b.2)))
}

/// Every grid point per task, `None` where training diverged.
fn task_sweep(model: &Model, task: &Task, cfg: &ProbeConfig, seed: u64, grid: &[f64]) -> Result<Vec<Option<LrOutcome>>> {
    let (tr, va) = fewshot_split(task, cfg, seed);
    let labels = task.local_labels(&task.fewshot);
    let split = Split {
        train_x: task.fewshot.inputs.select_rows(&tr)?,
        train_y: tr.iter().map(|&i| labels[i]).collect(),
        val_x: task.fewshot.inputs.select_rows(&va)?,
        val_y: va.iter().map(|&i| labels[i]).collect(),
    };
    grid.iter()
        .map(|&lr| match fit_one(model, task, cfg, seed, lr, &split) {
            Ok(o) => Ok(Some(o)),
            Err(Error::Training { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect()
}

/// LP-FT probe over every task. `model` is never modified; each task and
/// learning rate adapts its own copy, and only digests of the adapted copies
/// are kept.
pub fn lpft_probe(model: &Model, stream: &crate::data::TaskStream, cfg: &ProbeConfig, run_seed: u64) -> Result<ProbeResult> {
    cfg.validate()?;
    check_stream(model, stream)?;
    let seed = cfg.effective_seed(run_seed);
    let grid = cfg.lr_grid()?;
    let sweeps: Vec<Vec<Option<LrOutcome>>> = stream
        .tasks
        .par_iter()
        .map(|t| task_sweep(model, t, cfg, seed, &grid))
        .collect::<Result<_>>()?;

    let mut scores = Vec::with_capacity(sweeps.len());
    for (task, outcomes) in stream.tasks.iter().zip(&sweeps) {
        let mut best: Option<&LrOutcome> = None;
        for o in outcomes.iter().flatten() {
            if best.is_none_or(|b| better((o.val_accuracy, o.val_loss, o.lr), (b.val_accuracy, b.val_loss, b.lr))) {
                best = Some(o);
            }
        }
        let Some(best) = best else {
            return Err(Error::Training {
                task: task.task_id,
                epoch: 0,
                reason: "LP-FT probe diverged at every learning rate".into(),
            });
        };
        let test_selected = outcomes.iter().flatten().map(|o| o.test_accuracy).fold(f64::NEG_INFINITY, f64::max);
        scores.push(TaskScore {
            task: task.task_id,
            accuracy: best.test_accuracy,
            hyperparam: best.lr,
            test_selected_accuracy: cfg.report_test_selected.then_some(test_selected),
            adapted_digest: Some(best.digest.clone()),
            failed_hyperparams: grid
                .iter()
                .zip(outcomes)
                .filter(|(_, o)| o.is_none())
                .map(|(lr, _)| *lr)
                .collect(),
            lp_audits: outcomes.iter().flatten().map(|o| o.audit.clone()).collect(),
        });
    }

    // One rate for all tasks, over the rates that trained everywhere.
    let mut global: Option<(usize, (f64, f64, f64))> = None;
    for (j, &lr) in grid.iter().enumerate() {
        let Some(all) = sweeps.iter().map(|s| s[j].as_ref()).collect::<Option<Vec<_>>>() else {
            continue;
        };
        let n = all.len() as f64;
        let key = (
            all.iter().map(|o| o.val_accuracy).sum::<f64>() / n,
            all.iter().map(|o| o.val_loss).sum::<f64>() / n,
            lr,
        );
        if global.is_none_or(|(_, g)| better(key, g)) {
            global = Some((j, key));
        }
    }

    let mut result = ProbeResult::from_scores(ProbeKind::Lpft, scores, cfg.report_test_selected);
    result.global = global.map(|(j, _)| GlobalSelection {
        hyperparam: grid[j],
        average: sweeps.iter().map(|s| s[j].as_ref().expect("complete column").test_accuracy).sum::<f64>()
            / sweeps.len() as f64,
    });
    Ok(result)
}
