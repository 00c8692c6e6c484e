use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Head only, extractor frozen.
    Lp,
    /// Extractor and head together.
    Joint,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub task: usize,
    pub epoch: usize,
    pub phase: Phase,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

/// Evidence that a head-only phase left the extractor untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpAudit {
    pub task: usize,
    pub theta_digest_before: String,
    pub theta_digest_after: String,
    /// Full-batch loss at the end of the head-only phase.
    pub lp_final_loss: f64,
    /// Full-batch loss of the joint phase's starting point.
    pub joint_initial_loss: Option<f64>,
    /// Set when the L-BFGS head solver failed and SGD was used instead.
    #[serde(default)]
    pub solver_fallback: bool,
}

impl LpAudit {
    pub fn theta_unchanged(&self) -> bool {
        self.theta_digest_before == self.theta_digest_after
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub task: usize,
    /// Epoch (counted across both phases of the task) the carried-forward
    /// parameters come from.
    pub epoch: usize,
    pub average_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub lp_audits: Vec<LpAudit>,
    pub checkpoints: Vec<CheckpointRecord>,
    pub wall_clock_secs: f64,
}

impl TrainLog {
    /// Writes one JSON object per epoch record.
    pub fn write_jsonl(&self, mut out: impl Write) -> Result<()> {
        for rec in &self.epochs {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n").map_err(|e| crate::Error::io("<train log>", e))?;
        }
        Ok(())
    }

    pub fn task_losses(&self, task: usize) -> impl Iterator<Item = &EpochRecord> {
        self.epochs.iter().filter(move |r| r.task == task)
    }
}
