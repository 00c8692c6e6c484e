//! Sequential training over a task stream.

mod config;
mod engine;
mod log;
mod replay;
mod si;

pub use config::{
    CheckpointStrategy, LpSolver, Method, MethodParams, TrainConfig, DEFAULT_DER_ALPHA, DEFAULT_DER_CAPACITY,
    DEFAULT_SI_C, DEFAULT_SI_XI,
};
pub use engine::{
    average_test_accuracy, select_checkpoint, task_accuracy, train_stream, train_stream_from, train_task_der,
    train_task_lpft, train_task_sgd, train_task_si, TrainOutcome,
};
pub use log::{CheckpointRecord, EpochRecord, LpAudit, Phase, TrainLog};
pub use replay::{ReplayBuffer, ReplayEntry};
pub use si::SiState;

pub(crate) use engine::{head_loss, head_phase, joint_loss, joint_phase, Aux};
