//! Feature extractor / task-head split and checkpoints.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{Checkpoint, Provenance, MAGIC};
pub use config::{ModelConfig, GROUP_NORM_EPS};
pub use network::{
    argmax_rows, init_model, param_digest, Dense, ExtractorVars, FeatureExtractor, Head, HeadVars,
    HiddenLayer, Model,
};
