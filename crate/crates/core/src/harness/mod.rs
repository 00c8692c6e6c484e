//! Experiment orchestration: configuration, the learning-rate grid,
//! multi-seed runs, aggregation over seeds, ranking tables and reports.

mod config;
mod grid;
mod report;
mod run;
mod stats;

pub use config::{ExperimentConfig, LrPolicy, SelectBy};
pub use grid::{lr_grid, BASE_LR_GRID};
pub use report::{
    best_probe_of, emit_report, emit_sweep, format_cell, load_report, make_ranking_table, render_table,
    ExperimentReport, Fingerprint, FractionSweep, GridPoint, MethodReport, ProbeSummary, ProtocolNotes, RankEntry,
    RankingColumn, RankingTable, SweepRow, PER_TASK_CSV, REPORT_JSON, SWEEP_CSV, TABLE_TXT,
};
pub use run::{
    probe_checkpoint, run_experiment, select_lr, sweep_and_emit, sweep_fraction, write_run, ExperimentRun,
    RunArtifact, JOBS_ENV,
};
pub use stats::{aggregate_seeds, average_accuracy, CI_DEFINITION};
