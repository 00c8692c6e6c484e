use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::config::{CheckpointStrategy, LpSolver, TrainConfig};
use super::log::{CheckpointRecord, EpochRecord, LpAudit, Phase, TrainLog};
use super::replay::{ReplayBuffer, ReplayEntry};
use super::si::{flatten, flatten_grads, SiState};
use crate::autodiff::{ParamSet, Sgd, SgdConfig, Tape};
use crate::data::{stratified_split, Task, TaskStream};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, init_model, param_digest, HeadVars, ModelConfig, Provenance};
use crate::probes::lbfgs::LbfgsOptions;
use crate::probes::logreg::default_reg_grid;
use crate::probes::select::{sweep, Split};
use crate::rng::{substream, Stream};
use crate::{Checkpoint, Head, Model, Tensor};

/// Shuffled minibatches covering `0..n` once.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

fn shuffle_rng(seed: u64, task: usize, phase: Phase) -> ChaCha8Rng {
    let offset = match phase {
        Phase::Joint => 0,
        Phase::Lp => 1,
    };
    substream(seed, Stream::Shuffle, task as u64 * 2 + offset)
}

/// Wraps numerical failures as a training error for `(task, epoch)`.
fn at_epoch(task: usize, epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(what) => Error::Training {
            task,
            epoch,
            reason: format!("non-finite value in {what}"),
        },
        other => other,
    }
}

fn check_finite(task: usize, epoch: usize, loss: f64, params: &dyn ParamSet<f64>) -> Result<()> {
    let mut ok = loss.is_finite();
    params.visit_params(&mut |_, t| ok &= t.is_finite());
    if ok {
        Ok(())
    } else {
        Err(Error::Training {
            task,
            epoch,
            reason: "loss or parameters became non-finite".into(),
        })
    }
}

/// Mean cross-entropy of `head` on precomputed features.
pub(crate) fn head_loss(head: &Head, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = head.bind(&mut tape, false);
    let z = tape.constant(features.clone());
    let logits = head.forward(&mut tape, vars, z)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Mean cross-entropy of the full model on raw inputs, computed through a
/// trainable binding exactly as the joint phase sees it.
pub(crate) fn joint_loss(model: &Model, task_id: usize, inputs: &Tensor, labels: &[usize]) -> Result<f64> {
    let head = model.head(task_id)?;
    let mut tape = Tape::new();
    let ev = model.extractor.bind(&mut tape, true);
    let hv = head.bind(&mut tape, true);
    let x = tape.constant(inputs.clone());
    let z = model.extractor.forward(&mut tape, &ev, x)?;
    let logits = head.forward(&mut tape, hv, z)?;
    let loss = tape.cross_entropy(logits, labels)?;
    Ok(tape.value(loss).data()[0])
}

/// Task-incremental test accuracy of `task` under its own head.
pub fn task_accuracy(model: &Model, task: &Task) -> Result<f64> {
    let pred = argmax_rows(&model.predict(task.task_id, &task.test.inputs)?);
    let truth = task.local_labels(&task.test);
    Ok(pred.iter().zip(&truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64)
}

/// Mean test accuracy over `tasks`.
pub fn average_test_accuracy(model: &Model, tasks: &[Task]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Usage("no tasks to average over".into()));
    }
    let mut sum = 0.0;
    for t in tasks {
        sum += task_accuracy(model, t)?;
    }
    Ok(sum / tasks.len() as f64)
}

/// Head-only SGD on frozen features. `on_epoch` sees the epoch index and the
/// mean minibatch loss.
pub(crate) fn head_phase(
    head: &mut Head,
    features: &Tensor,
    labels: &[usize],
    sgd: &SgdConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    mut on_epoch: impl FnMut(usize, f64, &Head) -> Result<()>,
) -> Result<()> {
    let mut opt = Sgd::new(*sgd);
    for epoch in 0..epochs {
        let task = head.task_id;
        let batches = epoch_batches(labels.len(), sgd.batch_size, rng);
        let mut total = 0.0;
        for b in &batches {
            let mut tape = Tape::new();
            let z = tape.constant(features.select_rows(b)?);
            let hv = head.bind(&mut tape, true);
            let logits = head.forward(&mut tape, hv, z).map_err(at_epoch(task, epoch))?;
            let y: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &y).map_err(at_epoch(task, epoch))?;
            total += tape.value(loss).data()[0];
            let mut grads = tape.backward(loss)?;
            head.write_grads(hv, &mut grads)?;
            opt.step(head)?;
        }
        let mean = total / batches.len().max(1) as f64;
        check_finite(task, epoch, mean, head)?;
        on_epoch(epoch, mean, head)?;
    }
    Ok(())
}

/// Extra state threaded through the joint phase.
pub(crate) enum Aux<'a> {
    Plain,
    Si(&'a mut SiState),
    Der {
        buffer: &'a mut ReplayBuffer,
        alpha: f64,
    },
}

fn joint_step(
    model: &mut Model,
    task_id: usize,
    x: &Tensor,
    y: &[usize],
    opt: &mut Sgd<f64>,
    aux: &mut Aux<'_>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let ev = model.extractor.bind(&mut tape, true);
    let mut head_vars: BTreeMap<usize, HeadVars> = BTreeMap::new();
    let hv = model.head(task_id)?.bind(&mut tape, true);
    head_vars.insert(task_id, hv);
    let xv = tape.constant(x.clone());
    let z = model.extractor.forward(&mut tape, &ev, xv)?;
    let logits = model.head(task_id)?.forward(&mut tape, hv, z)?;
    let mut loss = tape.cross_entropy(logits, y)?;

    if let Aux::Der { buffer, alpha } = aux {
        if *alpha != 0.0 && !buffer.is_empty() {
            let picks = buffer.sample(opt.config().batch_size);
            let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &i in &picks {
                groups.entry(buffer.entries()[i].task_id).or_default().push(i);
            }
            let total = picks.len() as f64;
            for (t, idx) in groups {
                let head = model.head(t)?;
                let hv = *head_vars.entry(t).or_insert_with(|| head.bind(&mut tape, true));
                let inputs: Vec<Vec<f64>> = idx.iter().map(|&i| buffer.entries()[i].input.clone()).collect();
                let targets: Vec<Vec<f64>> = idx.iter().map(|&i| buffer.entries()[i].logits.clone()).collect();
                let xr = tape.constant(Tensor::from_rows(&inputs)?);
                let zr = model.extractor.forward(&mut tape, &ev, xr)?;
                let lr = head.forward(&mut tape, hv, zr)?;
                let m = tape.mse(lr, &Tensor::from_rows(&targets)?)?;
                let w = tape.scale(m, *alpha * idx.len() as f64 / total)?;
                loss = tape.add(loss, w)?;
            }
        }
    }

    let mut value = tape.value(loss).data()[0];
    let mut grads = tape.backward(loss)?;
    model.extractor.write_grads(&ev, &mut grads)?;
    for (t, hv) in head_vars {
        model.head_mut(t)?.write_grads(hv, &mut grads)?;
    }

    match aux {
        Aux::Si(si) => {
            let task_grad = flatten_grads(&model.extractor);
            let before = flatten(&model.extractor);
            if si.penalty_active() {
                value += si.penalty(&before);
                si.add_penalty_grad(&mut model.extractor)?;
            }
            opt.step(model)?;
            let after = flatten(&model.extractor);
            si.accumulate(&task_grad, &before, &after);
        }
        Aux::Der { buffer, .. } => {
            opt.step(model)?;
            let mut accepted = Vec::new();
            for pos in 0..y.len() {
                if let Some(slot) = buffer.offer() {
                    accepted.push((pos, slot));
                }
            }
            if !accepted.is_empty() {
                let rows: Vec<usize> = accepted.iter().map(|&(p, _)| p).collect();
                let logits = model.predict(task_id, &x.select_rows(&rows)?)?;
                let c = logits.shape()[1];
                for (k, &(pos, slot)) in accepted.iter().enumerate() {
                    let stored = logits.data()[k * c..(k + 1) * c].to_vec();
                    debug_assert!({
                        let single = model.predict(task_id, &x.select_rows(&[pos])?)?;
                        single.data() == stored.as_slice()
                    });
                    buffer.place(
                        slot,
                        ReplayEntry {
                            input: x.row(pos).to_vec(),
                            logits: stored,
                            task_id,
                        },
                    );
                }
            }
        }
        Aux::Plain => opt.step(model)?,
    }
    Ok(value)
}

/// Joint minibatch SGD over extractor and head(s).
#[allow(clippy::too_many_arguments)]
pub(crate) fn joint_phase(
    model: &mut Model,
    task_id: usize,
    inputs: &Tensor,
    labels: &[usize],
    sgd: &SgdConfig,
    epochs: usize,
    rng: &mut ChaCha8Rng,
    aux: &mut Aux<'_>,
    mut on_epoch: impl FnMut(usize, f64, &Model) -> Result<()>,
) -> Result<()> {
    let mut opt = Sgd::new(*sgd);
    for epoch in 0..epochs {
        let batches = epoch_batches(labels.len(), sgd.batch_size, rng);
        let mut total = 0.0;
        for b in &batches {
            let x = inputs.select_rows(b)?;
            let y: Vec<usize> = b.iter().map(|&i| labels[i]).collect();
            total += joint_step(model, task_id, &x, &y, &mut opt, aux).map_err(at_epoch(task_id, epoch))?;
        }
        let mean = total / batches.len().max(1) as f64;
        check_finite(task_id, epoch, mean, model)?;
        on_epoch(epoch, mean, model)?;
    }
    Ok(())
}

/// Full-batch logistic regression head on frozen features, regularization
/// chosen on a stratified 20% hold-out. `None` if the chosen fit did not
/// converge.
fn solve_head(model: &Model, task: &Task, features: &Tensor, labels: &[usize], seed: u64) -> Result<Option<Head>> {
    let mut rng = substream(seed, Stream::SolverSplit, task.task_id as u64);
    let (tr, va) = stratified_split(&task.train, 0.2, &mut rng);
    let va = if va.is_empty() { tr.clone() } else { va };
    let pick = |rows: &[usize]| -> Result<(Tensor, Vec<usize>)> {
        Ok((features.select_rows(rows)?, rows.iter().map(|&i| labels[i]).collect()))
    };
    let (ftr, ytr) = pick(&tr)?;
    let (fva, yva) = pick(&va)?;
    let outcome = sweep(
        Split { features: &ftr, labels: &ytr },
        Split { features: &fva, labels: &yva },
        model.config.classes_per_task,
        &default_reg_grid(),
        LbfgsOptions::default(),
    )?;
    let fit = outcome.chosen();
    Ok(fit.converged.then(|| fit.classifier.to_head(task.task_id)))
}

/// Epoch-level snapshots collected for checkpoint selection.
type History = Vec<(usize, Model)>;

/// Head-only phase of LP-FT. Records the audit entry; the joint phase fills
/// in `joint_initial_loss`.
fn lp_phase(
    model: &mut Model,
    task: &Task,
    config: &TrainConfig,
    log: &mut TrainLog,
    mut history: Option<&mut History>,
) -> Result<()> {
    let task_id = task.task_id;
    let digest_before = param_digest(&model.extractor);
    let features = model.extractor.features(&task.train.inputs)?;
    let labels = task.local_labels(&task.train);
    let mut solver_fallback = false;
    let mut solved = false;
    if config.method_params.lp_solver() == LpSolver::Lbfgs {
        match solve_head(model, task, &features, &labels, config.seed)? {
            Some(head) => {
                *model.head_mut(task_id)? = head;
                solved = true;
                if let Some(h) = history.as_deref_mut() {
                    h.push((0, model.clone()));
                }
            }
            None => solver_fallback = true,
        }
    }
    if !solved {
        let mut rng = shuffle_rng(config.seed, task_id, Phase::Lp);
        let mut head = model.head(task_id)?.clone();
        let lr = config.sgd.learning_rate;
        let mut epochs = Vec::new();
        let mut snaps = Vec::new();
        let want_snaps = history.is_some();
        head_phase(&mut head, &features, &labels, &config.sgd, config.lp_epochs, &mut rng, |epoch, loss, h| {
            epochs.push(EpochRecord {
                task: task_id,
                epoch,
                phase: Phase::Lp,
                loss,
                lr,
            });
            if want_snaps {
                snaps.push((epoch, h.clone()));
            }
            Ok(())
        })?;
        log.epochs.extend(epochs);
        if let Some(hist) = history {
            for (epoch, h) in snaps {
                let mut m = model.clone();
                *m.head_mut(task_id)? = h;
                hist.push((epoch, m));
            }
        }
        *model.head_mut(task_id)? = head;
    }
    let lp_final_loss = head_loss(model.head(task_id)?, &features, &labels)?;
    let digest_after = param_digest(&model.extractor);
    log.lp_audits.push(LpAudit {
        task: task_id,
        theta_digest_before: digest_before,
        theta_digest_after: digest_after,
        lp_final_loss,
        joint_initial_loss: None,
        solver_fallback,
    });
    Ok(())
}

/// One task of any method: optional head-only phase, then the joint phase
/// with the method's replay or penalty.
fn run_task(
    model: &mut Model,
    task: &Task,
    config: &TrainConfig,
    lp_first: bool,
    aux: &mut Aux<'_>,
    log: &mut TrainLog,
    mut history: Option<&mut History>,
) -> Result<()> {
    let task_id = task.task_id;
    if !model.heads.contains_key(&task_id) {
        model.add_head(task_id);
    }
    let (joint_epochs, offset) = if lp_first {
        lp_phase(model, task, config, log, history.as_deref_mut())?;
        (config.ft_epochs, config.lp_epochs)
    } else {
        (config.epochs_per_task, 0)
    };
    let labels = task.local_labels(&task.train);
    if lp_first {
        let initial = joint_loss(model, task_id, &task.train.inputs, &labels)?;
        if let Some(audit) = log.lp_audits.last_mut() {
            audit.joint_initial_loss = Some(initial);
        }
    }
    let mut rng = shuffle_rng(config.seed, task_id, Phase::Joint);
    let lr = config.sgd.learning_rate;
    let epochs = &mut log.epochs;
    joint_phase(
        model,
        task_id,
        &task.train.inputs,
        &labels,
        &config.sgd,
        joint_epochs,
        &mut rng,
        aux,
        |epoch, loss, m| {
            epochs.push(EpochRecord {
                task: task_id,
                epoch: offset + epoch,
                phase: Phase::Joint,
                loss,
                lr,
            });
            if let Some(h) = history.as_deref_mut() {
                h.push((offset + epoch, m.clone()));
            }
            Ok(())
        },
    )
}

/// Naive sequential fine-tuning on one task. Registers a fresh head for the
/// task if none exists.
pub fn train_task_sgd(model: &mut Model, task: &Task, config: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    run_task(model, task, config, false, &mut Aux::Plain, log, None)
}

/// Head-only phase for `lp_epochs` (or the L-BFGS solver), then joint
/// fine-tuning for `ft_epochs`.
pub fn train_task_lpft(model: &mut Model, task: &Task, config: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    run_task(model, task, config, true, &mut Aux::Plain, log, None)
}

/// SI-regularized training followed by consolidation of the path integral.
/// Runs the head-only phase first when the configured method composes SI
/// with LP-FT.
pub fn train_task_si(
    model: &mut Model,
    task: &Task,
    si: &mut SiState,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    run_task(model, task, config, config.method.has_lp_phase(), &mut Aux::Si(si), log, None)?;
    si.consolidate(&flatten(&model.extractor));
    Ok(())
}

/// Dark-experience-replay training. Runs the head-only phase first when the
/// configured method composes DER with LP-FT.
pub fn train_task_der(
    model: &mut Model,
    task: &Task,
    buffer: &mut ReplayBuffer,
    config: &TrainConfig,
    log: &mut TrainLog,
) -> Result<()> {
    let alpha = config.method_params.der_alpha();
    run_task(
        model,
        task,
        config,
        config.method.has_lp_phase(),
        &mut Aux::Der { buffer, alpha },
        log,
        None,
    )
}

/// Picks the checkpoint with the highest score; ties go to the later one.
/// Returns its position, the checkpoint and its score.
pub fn select_checkpoint<T>(history: Vec<T>, mut eval: impl FnMut(&T) -> Result<f64>) -> Result<(usize, T, f64)> {
    if history.is_empty() {
        return Err(Error::Usage("checkpoint selection over an empty history".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, h) in history.iter().enumerate() {
        let score = eval(h)?;
        if best.is_none_or(|(_, b)| score >= b) {
            best = Some((i, score));
        }
    }
    let (i, score) = best.expect("nonempty history");
    let chosen = history.into_iter().nth(i).expect("index in range");
    Ok((i, chosen, score))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Extractor and heads after the final task.
    pub model: Model,
    pub log: TrainLog,
    /// Carried-forward model at the end of every task.
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains a fresh model over every task of `stream` in order.
pub fn train_stream(stream: &TaskStream, model_config: &ModelConfig, config: &TrainConfig) -> Result<TrainOutcome> {
    train_stream_from(init_model(model_config)?, stream, config)
}

/// Like [`train_stream`], starting from an existing model.
pub fn train_stream_from(mut model: Model, stream: &TaskStream, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if stream.is_empty() {
        return Err(Error::Config("empty task stream".into()));
    }
    if stream.input_dim() != model.config.input_dim {
        return Err(Error::Config(format!(
            "stream inputs have {} features, model expects {}",
            stream.input_dim(),
            model.config.input_dim
        )));
    }
    if let Some(t) = stream.tasks.iter().find(|t| t.num_classes() != model.config.classes_per_task) {
        return Err(Error::Config(format!(
            "task {} has {} classes, heads have {}",
            t.task_id,
            t.num_classes(),
            model.config.classes_per_task
        )));
    }

    let start = Instant::now();
    let method = config.method;
    let params = &config.method_params;
    let mut si = method
        .uses_si()
        .then(|| SiState::new(&model.extractor, params.si_c(), params.si_xi()));
    let mut buffer = method
        .uses_replay()
        .then(|| ReplayBuffer::new(params.der_capacity(), config.seed));
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::with_capacity(stream.len());
    let best_avg = config.checkpoint_strategy == CheckpointStrategy::BestAvg;

    for (t, task) in stream.tasks.iter().enumerate() {
        let mut history = History::new();
        let hist = best_avg.then_some(&mut history);
        let mut aux = match (&mut si, &mut buffer) {
            (Some(s), _) => Aux::Si(s),
            (_, Some(b)) => Aux::Der {
                buffer: b,
                alpha: params.der_alpha(),
            },
            _ => Aux::Plain,
        };
        run_task(&mut model, task, config, method.has_lp_phase(), &mut aux, &mut log, hist)?;

        let record = if best_avg && !history.is_empty() {
            let seen = &stream.tasks[..=t];
            let ((epoch, chosen), score) = {
                let (_, (epoch, m), score) = select_checkpoint(history, |(_, m)| average_test_accuracy(m, seen))?;
                ((epoch, m), score)
            };
            model = chosen;
            CheckpointRecord {
                task: task.task_id,
                epoch,
                average_accuracy: Some(score),
            }
        } else {
            let epochs = if method.has_lp_phase() {
                config.lp_epochs + config.ft_epochs
            } else {
                config.epochs_per_task
            };
            CheckpointRecord {
                task: task.task_id,
                epoch: epochs.saturating_sub(1),
                average_accuracy: None,
            }
        };
        if let Some(s) = si.as_mut() {
            s.consolidate(&flatten(&model.extractor));
        }
        log.checkpoints.push(record);
        checkpoints.push(Checkpoint::new(
            model.clone(),
            Provenance {
                method: config.label(),
                task: task.task_id,
                seed: config.seed,
            },
        ));
    }
    log.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        model,
        log,
        checkpoints,
    })
}
