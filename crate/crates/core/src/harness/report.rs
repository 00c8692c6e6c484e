use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::stats::CI_DEFINITION;
use crate::error::{Error, Result};
use crate::probes::{best_probe, ProbeKind, ProbeResult};

/// One (method, learning rate, seed) training run of the selection sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub method: String,
    pub lr: f64,
    pub seed: u64,
    /// Average kNN-probe accuracy of the final model.
    pub knn_average: Option<f64>,
    pub error: Option<String>,
}

/// One probe applied to a method's final models across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub probe: ProbeKind,
    /// Average accuracy per seed, in seed order.
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub half_width: f64,
    /// Full results per seed, with the per-task accuracies.
    pub results: Vec<ProbeResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: String,
    pub selected_lr: Option<f64>,
    pub seeds: Vec<u64>,
    pub probes: Vec<ProbeSummary>,
    pub best_probe: Option<ProbeKind>,
    /// Set when no learning rate trained on every seed.
    pub failed: bool,
}

impl MethodReport {
    pub fn summary(&self, probe: ProbeKind) -> Option<&ProbeSummary> {
        self.probes.iter().find(|p| p.probe == probe)
    }
}

/// Where the numbers came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    /// SHA-256 of the effective configuration as JSON.
    pub config_sha256: String,
    pub code_version: String,
}

/// Protocol choices that shape every number in the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolNotes {
    pub confidence_interval: String,
    pub fewshot_sampling: String,
    pub probe_selection: String,
    pub lr_selection: String,
    pub regularized_parameters: String,
    pub knn: String,
}

impl ProtocolNotes {
    pub fn for_config(cfg: &ExperimentConfig) -> Self {
        let knn = cfg
            .probes
            .iter()
            .find(|p| p.kind == ProbeKind::Knn)
            .map(|p| {
                format!(
                    "cosine similarity on L2-normalized features, k = min({}, few-shot size), vote weight exp(sim / {})",
                    p.knn_k, p.knn_temperature
                )
            })
            .unwrap_or_else(|| "not run".into());
        Self {
            confidence_interval: CI_DEFINITION.into(),
            fewshot_sampling: "stratified per class, ceil(fraction * class size) rows".into(),
            probe_selection: "hyperparameters chosen on a stratified hold-out of each few-shot set".into(),
            lr_selection: format!("{:?} policy, compared by {:?} kNN-probe accuracy", cfg.lr_policy, cfg.select_by)
                .to_lowercase(),
            regularized_parameters: "SI penalizes the feature extractor only; DER replay also trains the heads of replayed tasks".into(),
            knn,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub rank: usize,
    pub method: String,
    pub mean: f64,
    pub half_width: f64,
    /// Probe behind the entry (best-probe column only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<ProbeKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingColumn {
    pub header: String,
    pub entries: Vec<RankEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingTable {
    pub columns: Vec<RankingColumn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Unix seconds at emission; the only field that varies between
    /// identical runs.
    pub timestamp: u64,
    pub fingerprint: Fingerprint,
    pub protocol: ProtocolNotes,
    pub config: ExperimentConfig,
    pub grid: Vec<GridPoint>,
    pub methods: Vec<MethodReport>,
    pub ranking: RankingTable,
}

fn rank_column(header: String, mut rows: Vec<RankEntry>) -> RankingColumn {
    rows.sort_by(|a, b| b.mean.total_cmp(&a.mean).then_with(|| a.method.cmp(&b.method)));
    for (i, r) in rows.iter_mut().enumerate() {
        r.rank = i + 1;
    }
    RankingColumn { header, entries: rows }
}

/// Per probe, methods ranked by mean accuracy (ties by method name), plus a
/// best-probe column.
pub fn make_ranking_table(reports: &[MethodReport]) -> RankingTable {
    let mut kinds: Vec<ProbeKind> = reports.iter().flat_map(|r| r.probes.iter().map(|p| p.probe)).collect();
    kinds.sort();
    kinds.dedup();
    let live: Vec<&MethodReport> = reports.iter().filter(|r| !r.failed).collect();
    let mut columns = Vec::new();
    for kind in kinds {
        let rows = live
            .iter()
            .filter_map(|r| {
                r.summary(kind).map(|s| RankEntry {
                    rank: 0,
                    method: r.method.clone(),
                    mean: s.mean,
                    half_width: s.half_width,
                    probe: None,
                })
            })
            .collect();
        columns.push(rank_column(kind.name().to_string(), rows));
    }
    let best_rows = live
        .iter()
        .filter_map(|r| {
            let kind = r.best_probe?;
            let s = r.summary(kind)?;
            Some(RankEntry {
                rank: 0,
                method: r.method.clone(),
                mean: s.mean,
                half_width: s.half_width,
                probe: Some(kind),
            })
        })
        .collect();
    columns.push(rank_column("best".into(), best_rows));
    RankingTable { columns }
}

/// The probe with the highest mean over seeds (ties to the cheaper probe).
pub fn best_probe_of(summaries: &[ProbeSummary]) -> Option<ProbeKind> {
    let stand_ins: Vec<ProbeResult> = summaries
        .iter()
        .map(|s| ProbeResult {
            probe: s.probe,
            per_task: vec![],
            average: s.mean,
            test_selected_average: None,
            global: None,
        })
        .collect();
    best_probe(&stand_ins).ok().map(|r| r.probe)
}

/// Table cell: accuracy in percent with the half-width.
pub fn format_cell(mean: f64, half_width: f64) -> String {
    format!("{:.2} (±{:.2})", 100.0 * mean, 100.0 * half_width)
}

/// Plain-text table: one row per method, one column per probe and the best
/// probe, each cell `rank. mean (±hw)` in percent.
pub fn render_table(table: &RankingTable) -> String {
    let mut methods: Vec<String> = table
        .columns
        .iter()
        .flat_map(|c| c.entries.iter().map(|e| e.method.clone()))
        .collect();
    methods.sort();
    methods.dedup();
    let cell = |col: &RankingColumn, m: &str| -> String {
        col.entries
            .iter()
            .find(|e| e.method == m)
            .map(|e| {
                let probe = e.probe.map(|p| format!(" [{p}]")).unwrap_or_default();
                format!("{}. {}{probe}", e.rank, format_cell(e.mean, e.half_width))
            })
            .unwrap_or_else(|| "-".into())
    };
    let mut rows: Vec<Vec<String>> = vec![std::iter::once("method".to_string())
        .chain(table.columns.iter().map(|c| c.header.clone()))
        .collect()];
    for m in &methods {
        rows.push(
            std::iter::once(m.clone())
                .chain(table.columns.iter().map(|c| cell(c, m)))
                .collect(),
        );
    }
    let ncols = rows[0].len();
    let widths: Vec<usize> = (0..ncols)
        .map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, r) in rows.iter().enumerate() {
        let line: Vec<String> = r
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:<w$}"))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (ncols - 1)));
        }
    }
    let _ = writeln!(out, "\ncells: rank. {CI_DEFINITION}, in percent");
    out
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

fn write_per_task_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["method", "probe", "seed", "task", "accuracy", "hyperparam"])
        .map_err(|e| csv_error(path, e))?;
    for m in &report.methods {
        for s in &m.probes {
            for (seed, r) in m.seeds.iter().zip(&s.results) {
                for t in &r.per_task {
                    w.write_record([
                        m.method.clone(),
                        s.probe.to_string(),
                        seed.to_string(),
                        t.task.to_string(),
                        t.accuracy.to_string(),
                        t.hyperparam.to_string(),
                    ])
                    .map_err(|e| csv_error(path, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub const REPORT_JSON: &str = "report.json";
pub const PER_TASK_CSV: &str = "per_task.csv";
pub const TABLE_TXT: &str = "table.txt";

/// Writes `report.json`, `per_task.csv` and `table.txt` into `dir`.
pub fn emit_report(report: &ExperimentReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = dir.join(REPORT_JSON);
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    write_file(&json, text.as_bytes())?;
    let csv = dir.join(PER_TASK_CSV);
    write_per_task_csv(report, &csv)?;
    let table = dir.join(TABLE_TXT);
    write_file(&table, render_table(&report.ranking).as_bytes())?;
    Ok(vec![json, csv, table])
}

pub fn load_report(dir: &Path) -> Result<ExperimentReport> {
    let path = dir.join(REPORT_JSON);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Mean probe accuracy per few-shot fraction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: String,
    pub probe: ProbeKind,
    pub fraction: f64,
    pub seed: u64,
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionSweep {
    pub fractions: Vec<f64>,
    pub rows: Vec<SweepRow>,
}

impl FractionSweep {
    /// Seed averages for one (method, probe) curve, indexed `[seed][fraction]`.
    pub fn curves(&self, method: &str, probe: ProbeKind, seeds: &[u64]) -> Vec<Vec<f64>> {
        seeds
            .iter()
            .map(|&s| {
                self.fractions
                    .iter()
                    .map(|&f| {
                        self.rows
                            .iter()
                            .find(|r| r.method == method && r.probe == probe && r.seed == s && r.fraction == f)
                            .map_or(f64::NAN, |r| r.average)
                    })
                    .collect()
            })
            .collect()
    }
}

pub const SWEEP_CSV: &str = "fraction_sweep.csv";

/// Writes `fraction_sweep.csv` (one row per method, probe, fraction, seed).
pub fn emit_sweep(sweep: &FractionSweep, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(SWEEP_CSV);
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    w.write_record(["method", "probe", "fraction", "seed", "average"])
        .map_err(|e| csv_error(&path, e))?;
    for r in &sweep.rows {
        w.write_record([
            r.method.clone(),
            r.probe.to_string(),
            r.fraction.to_string(),
            r.seed.to_string(),
            r.average.to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
