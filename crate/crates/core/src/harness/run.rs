use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, LrPolicy, SelectBy};
use super::grid::lr_grid;
use super::report::{
    best_probe_of, emit_report, emit_sweep, make_ranking_table, ExperimentReport, Fingerprint, FractionSweep,
    GridPoint, MethodReport, ProbeSummary, ProtocolNotes, SweepRow,
};
use super::stats::aggregate_seeds;
use crate::data::TaskStream;
use crate::error::{Error, Result};
use crate::probes::{run_probe, ProbeConfig, ProbeKind, ProbeResult};
use crate::trainers::{train_stream, Method, TrainLog};
use crate::{Checkpoint, Model};

/// Caps the number of runs executing at once.
pub const JOBS_ENV: &str = "CONTILEARN_JOBS";

fn job_count() -> Result<usize> {
    match std::env::var(JOBS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("{JOBS_ENV}={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(job_count()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// A trained run kept for reporting.
#[derive(Debug, Clone)]
pub struct RunArtifact {
    pub method: String,
    pub lr: f64,
    pub seed: u64,
    pub log: TrainLog,
    pub checkpoint: Checkpoint,
}

#[derive(Debug, Clone)]
pub struct ExperimentRun {
    pub report: ExperimentReport,
    /// Every successful grid point, in (method, lr, seed) order.
    pub artifacts: Vec<RunArtifact>,
}

impl ExperimentRun {
    /// True when some method trained on no learning rate for all seeds.
    pub fn any_failed(&self) -> bool {
        self.report.methods.iter().any(|m| m.failed)
    }
}

fn fingerprint(cfg: &ExperimentConfig) -> Result<Fingerprint> {
    let json = serde_json::to_vec(cfg)?;
    Ok(Fingerprint {
        config_sha256: Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
    })
}

fn timestamp() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn streams(cfg: &ExperimentConfig, fraction: f64) -> Result<Vec<TaskStream>> {
    cfg.seeds.iter().map(|&s| cfg.data.build(fraction, s)).collect()
}

fn knn_config(cfg: &ExperimentConfig) -> Option<&ProbeConfig> {
    cfg.probes.iter().find(|p| p.kind == ProbeKind::Knn)
}

struct Trained {
    point: GridPoint,
    artifact: Option<RunArtifact>,
}

fn train_point(cfg: &ExperimentConfig, stream: &TaskStream, method: Method, lr: f64, seed: u64) -> Result<Trained> {
    let tc = cfg.train_config(method, seed, lr);
    let label = tc.label();
    let outcome = match train_stream(stream, &cfg.model_config(seed), &tc) {
        Ok(o) => o,
        Err(e @ (Error::Training { .. } | Error::NonFinite(_))) => {
            return Ok(Trained {
                point: GridPoint {
                    method: label,
                    lr,
                    seed,
                    knn_average: None,
                    error: Some(e.to_string()),
                },
                artifact: None,
            })
        }
        Err(e) => return Err(e),
    };
    let knn_average = match knn_config(cfg) {
        Some(k) => Some(run_probe(&outcome.model, stream, k, seed)?.average),
        None => None,
    };
    let checkpoint = outcome.checkpoints.last().expect("nonempty stream").clone();
    Ok(Trained {
        point: GridPoint {
            method: label.clone(),
            lr,
            seed,
            knn_average,
            error: None,
        },
        artifact: Some(RunArtifact {
            method: label,
            lr,
            seed,
            log: outcome.log,
            checkpoint,
        }),
    })
}

/// The learning rate whose seeds all trained and whose kNN accuracy scores
/// best; ties go to the smaller rate. Works from grid points alone.
pub fn select_lr(points: &[GridPoint], method: &str, seeds: &[u64], select_by: SelectBy) -> Option<f64> {
    let mut lrs: Vec<f64> = points.iter().filter(|p| p.method == method).map(|p| p.lr).collect();
    lrs.sort_by(f64::total_cmp);
    lrs.dedup();
    let mut best: Option<(f64, f64)> = None;
    for lr in lrs {
        let vals: Option<Vec<f64>> = seeds
            .iter()
            .map(|&s| {
                points
                    .iter()
                    .find(|p| p.method == method && p.lr == lr && p.seed == s && p.error.is_none())
                    .map(|p| p.knn_average.unwrap_or(0.0))
            })
            .collect();
        let Some(vals) = vals else { continue };
        let (mean, hw) = aggregate_seeds(&vals);
        let score = match select_by {
            SelectBy::Mean => mean,
            SelectBy::LowerBound => mean - hw,
        };
        if best.is_none_or(|(_, b)| score > b) {
            best = Some((lr, score));
        }
    }
    best.map(|(lr, _)| lr)
}

/// Trains every method over the learning-rate grid and all seeds, selects a
/// rate per method by kNN-probe accuracy, then runs every configured probe on
/// the selected runs. Training failures mark their grid point; only
/// configuration, data and I/O problems abort the experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let streams = streams(cfg, cfg.fewshot_fraction)?;
    let methods = cfg.methods();
    let lrs = match cfg.lr_policy {
        LrPolicy::Grid => lr_grid(cfg.train.sgd.batch_size)?,
        LrPolicy::Fixed => vec![cfg.train.sgd.learning_rate],
    };
    let mut jobs = Vec::new();
    for &m in &methods {
        for &lr in &lrs {
            for (i, &s) in cfg.seeds.iter().enumerate() {
                jobs.push((m, lr, i, s));
            }
        }
    }
    let trained: Vec<Trained> = with_pool(|| {
        jobs.par_iter()
            .map(|&(m, lr, i, s)| train_point(cfg, &streams[i], m, lr, s))
            .collect::<Result<Vec<_>>>()
    })??;
    let grid: Vec<GridPoint> = trained.iter().map(|t| t.point.clone()).collect();
    let artifacts: Vec<RunArtifact> = trained.into_iter().filter_map(|t| t.artifact).collect();

    let labels: Vec<String> = methods.iter().map(|&m| cfg.train_config(m, 0, 0.0).label()).collect();
    let selected: Vec<Option<f64>> = labels
        .iter()
        .map(|l| select_lr(&grid, l, &cfg.seeds, cfg.select_by))
        .collect();

    let mut probe_jobs = Vec::new();
    for (mi, (label, lr)) in labels.iter().zip(&selected).enumerate() {
        let Some(lr) = lr else { continue };
        for (si, &s) in cfg.seeds.iter().enumerate() {
            let art = artifacts
                .iter()
                .find(|a| &a.method == label && a.lr == *lr && a.seed == s)
                .expect("selected runs trained on every seed");
            for (pi, p) in cfg.probes.iter().enumerate() {
                probe_jobs.push((mi, si, pi, &art.checkpoint.model, p, s));
            }
        }
    }
    let probe_results: Vec<ProbeResult> = with_pool(|| {
        probe_jobs
            .par_iter()
            .map(|&(_, si, _, model, p, s)| run_probe(model, &streams[si], p, s))
            .collect::<Result<Vec<_>>>()
    })??;

    let mut method_reports = Vec::with_capacity(labels.len());
    for (mi, label) in labels.iter().enumerate() {
        let mut probes = Vec::new();
        for (pi, p) in cfg.probes.iter().enumerate() {
            let results: Vec<ProbeResult> = probe_jobs
                .iter()
                .zip(&probe_results)
                .filter(|((m, _, q, ..), _)| *m == mi && *q == pi)
                .map(|(_, r)| r.clone())
                .collect();
            if results.is_empty() {
                continue;
            }
            let per_seed: Vec<f64> = results.iter().map(|r| r.average).collect();
            let (mean, half_width) = aggregate_seeds(&per_seed);
            probes.push(ProbeSummary {
                probe: p.kind,
                per_seed,
                mean,
                half_width,
                results,
            });
        }
        method_reports.push(MethodReport {
            method: label.clone(),
            selected_lr: selected[mi],
            seeds: cfg.seeds.clone(),
            best_probe: best_probe_of(&probes),
            failed: selected[mi].is_none(),
            probes,
        });
    }
    let ranking = make_ranking_table(&method_reports);
    Ok(ExperimentRun {
        report: ExperimentReport {
            timestamp: timestamp(),
            fingerprint: fingerprint(cfg)?,
            protocol: ProtocolNotes::for_config(cfg),
            config: cfg.clone(),
            grid,
            methods: method_reports,
            ranking,
        },
        artifacts,
    })
}

fn file_stem(method: &str, lr: f64, seed: u64) -> String {
    format!("{method}_lr{lr}_seed{seed}")
}

/// Writes the report files, one JSON-lines training log per grid point under
/// `logs/`, and the final checkpoint of every selected run under
/// `checkpoints/`.
pub fn write_run(run: &ExperimentRun, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = emit_report(&run.report, dir)?;
    let logs = dir.join("logs");
    let ckpts = dir.join("checkpoints");
    for d in [&logs, &ckpts] {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for a in &run.artifacts {
        let stem = file_stem(&a.method, a.lr, a.seed);
        let path = logs.join(format!("{stem}.jsonl"));
        let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        a.log.write_jsonl(std::io::BufWriter::new(file))?;
        files.push(path);
        let selected = run
            .report
            .methods
            .iter()
            .any(|m| m.method == a.method && m.selected_lr == Some(a.lr));
        if selected {
            let path = ckpts.join(format!("{stem}.ckpt"));
            a.checkpoint.save(&path)?;
            files.push(path);
        }
    }
    Ok(files)
}

/// Trains each method once per seed at the configured learning rate, then
/// probes the final model with few-shot sets redrawn at every fraction.
pub fn sweep_fraction(cfg: &ExperimentConfig, fractions: &[f64]) -> Result<FractionSweep> {
    cfg.validate()?;
    if fractions.is_empty() {
        return Err(Error::Config("no few-shot fractions given".into()));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("few-shot fraction {f} outside (0, 1]")));
    }
    let streams = streams(cfg, cfg.fewshot_fraction)?;
    let methods = cfg.methods();
    let lr = cfg.train.sgd.learning_rate;
    let mut jobs = Vec::new();
    for &m in &methods {
        for (i, &s) in cfg.seeds.iter().enumerate() {
            jobs.push((m, i, s));
        }
    }
    let per_job: Vec<Vec<SweepRow>> = with_pool(|| {
        jobs.par_iter()
            .map(|&(m, i, s)| -> Result<Vec<SweepRow>> {
                let tc = cfg.train_config(m, s, lr);
                let model: Model = train_stream(&streams[i], &cfg.model_config(s), &tc)?.model;
                let mut rows = Vec::new();
                for &f in fractions {
                    let stream = streams[i].with_fewshot_fraction(f, s)?;
                    for p in &cfg.probes {
                        rows.push(SweepRow {
                            method: tc.label(),
                            probe: p.kind,
                            fraction: f,
                            seed: s,
                            average: run_probe(&model, &stream, p, s)?.average,
                        });
                    }
                }
                Ok(rows)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    Ok(FractionSweep {
        fractions: fractions.to_vec(),
        rows: per_job.into_iter().flatten().collect(),
    })
}

/// Runs [`sweep_fraction`] and writes `fraction_sweep.csv` into `dir`.
pub fn sweep_and_emit(cfg: &ExperimentConfig, fractions: &[f64], dir: &Path) -> Result<(FractionSweep, PathBuf)> {
    let sweep = sweep_fraction(cfg, fractions)?;
    let path = emit_sweep(&sweep, dir)?;
    Ok((sweep, path))
}

/// Probes a saved model with the configured probes. The few-shot draw and
/// probe randomness follow the seed recorded in the checkpoint.
pub fn probe_checkpoint(checkpoint: &Checkpoint, cfg: &ExperimentConfig) -> Result<Vec<ProbeResult>> {
    cfg.validate()?;
    let seed = checkpoint.provenance.seed;
    let stream = cfg.data.build(cfg.fewshot_fraction, seed)?;
    cfg.probes
        .iter()
        .map(|p| run_probe(&checkpoint.model, &stream, p, seed))
        .collect()
}
