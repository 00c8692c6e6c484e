//! Few-shot probes of a frozen feature extractor: kNN, linear (logistic
//! regression with a regularization sweep) and LP-FT.

pub mod knn;
pub mod lbfgs;
pub mod logreg;
mod lpft;
mod probe;
pub mod select;

pub use knn::{knn_predict, l2_normalize};
pub use lpft::lpft_probe;
pub use probe::{
    best_probe, knn_probe, linear_probe, run_probe, GlobalSelection, ProbeConfig, ProbeKind, ProbeLpAudit,
    ProbeResult, TaskScore,
};
