use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use contilearn::error::{Error, Result};
use contilearn::harness::{
    load_report, probe_checkpoint, render_table, run_experiment, sweep_and_emit, write_run, ExperimentConfig,
};
use contilearn::Checkpoint;

#[derive(Parser)]
#[command(name = "contilearn", version, about = "Continual pretraining methods and few-shot probes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every method over the lr grid and seeds, probe, and write a report.
    Run {
        config: PathBuf,
        /// Overrides `output_dir` from the config.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Run the configured probes on a saved checkpoint and print JSON.
    Probe { checkpoint: PathBuf, config: PathBuf },
    /// Print the ranking table of a finished run.
    Report { run_dir: PathBuf },
    /// Probe accuracy as a function of the few-shot fraction.
    SweepFraction {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.5,1.0")]
        fractions: Vec<f64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Usage(_) => 2,
        Error::Training { .. } | Error::NonFinite(_) | Error::Dimension(_) => 3,
        Error::Io { .. } | Error::Json(_) | Error::CorruptCheckpoint(_) | Error::VersionMismatch { .. } | Error::Data(_) => 4,
    }
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::Io { path: "<stdout>".into(), source: e }),
        _ => Ok(()),
    }
}

fn output_dir(cfg: &ExperimentConfig, over: Option<PathBuf>) -> PathBuf {
    over.unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

fn run(config: &Path, out: Option<PathBuf>) -> Result<u8> {
    let cfg = ExperimentConfig::load(config)?;
    let dir = output_dir(&cfg, out);
    let run = run_experiment(&cfg)?;
    write_run(&run, &dir)?;
    emit(&render_table(&run.report.ranking))?;
    for m in run.report.methods.iter().filter(|m| m.failed) {
        eprintln!("method {} failed at every learning rate", m.method);
    }
    eprintln!("report written to {}", dir.display());
    Ok(if run.any_failed() { 3 } else { 0 })
}

fn execute(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Run { config, output_dir } => run(&config, output_dir),
        Command::Probe { checkpoint, config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let results = probe_checkpoint(&ckpt, &cfg)?;
            emit(&(serde_json::to_string_pretty(&results)? + "\n"))?;
            Ok(0)
        }
        Command::Report { run_dir } => {
            let report = load_report(&run_dir)?;
            emit(&render_table(&report.ranking))?;
            Ok(0)
        }
        Command::SweepFraction {
            config,
            fractions,
            output_dir: out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output_dir(&cfg, out);
            let (_, path) = sweep_and_emit(&cfg, &fractions, &dir)?;
            emit(&format!("{}\n", path.display()))?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
