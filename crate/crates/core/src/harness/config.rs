use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DataSource;
use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::probes::{ProbeConfig, ProbeKind};
use crate::trainers::{Method, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrPolicy {
    /// Sweep the batch-size-scaled grid and keep the best rate per method.
    #[default]
    Grid,
    /// Use `train.sgd.learning_rate` as given.
    Fixed,
}

/// How grid points are compared across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectBy {
    /// Highest mean kNN-probe accuracy.
    #[default]
    Mean,
    /// Highest mean minus confidence half-width.
    LowerBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Methods to compare; defaults to `[train.method]`. Method parameters
    /// that do not apply to a method are dropped for it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<Method>>,
    #[serde(default = "default_probes")]
    pub probes: Vec<ProbeConfig>,
    #[serde(default = "default_fraction")]
    pub fewshot_fraction: f64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lr_policy: LrPolicy,
    #[serde(default)]
    pub select_by: SelectBy,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_probes() -> Vec<ProbeConfig> {
    ProbeKind::ALL.into_iter().map(ProbeConfig::new).collect()
}

fn default_fraction() -> f64 {
    0.1
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            methods: None,
            probes: default_probes(),
            fewshot_fraction: default_fraction(),
            seeds: default_seeds(),
            lr_policy: LrPolicy::Grid,
            select_by: SelectBy::Mean,
            output_dir: default_output_dir(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.clone().unwrap_or_else(|| vec![self.train.method])
    }

    /// Training configuration for one method and run seed.
    pub fn train_config(&self, method: Method, seed: u64, lr: f64) -> TrainConfig {
        let mut t = self.train.for_method(method);
        t.seed = seed;
        t.sgd.learning_rate = lr;
        t
    }

    /// Model configuration for one run seed.
    pub fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            init_seed: seed,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.fewshot_fraction > 0.0 && self.fewshot_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "fewshot_fraction {} outside (0, 1]",
                self.fewshot_fraction
            )));
        }
        let methods = self.methods();
        if methods.is_empty() {
            return Err(Error::Config("methods must not be empty".into()));
        }
        if self.methods.is_some() {
            // Knobs must apply to at least one listed method.
            let p = &self.train.method_params;
            let used = |f: fn(Method) -> bool| methods.iter().any(|&m| f(m));
            if (p.si_c.is_some() || p.si_xi.is_some()) && !used(Method::uses_si)
                || (p.der_alpha.is_some() || p.der_capacity.is_some()) && !used(Method::uses_replay)
                || p.lp_solver.is_some() && !used(Method::has_lp_phase)
            {
                return Err(Error::Config("method_params set for none of the listed methods".into()));
            }
            for &m in &methods {
                self.train.for_method(m).validate()?;
            }
        } else {
            self.train.validate()?;
        }
        self.model.validate()?;
        if let DataSource::Synthetic(spec) = &self.data {
            spec.validate()?;
            if spec.input_dim != self.model.input_dim {
                return Err(Error::Config(format!(
                    "data.input_dim {} differs from model.input_dim {}",
                    spec.input_dim, self.model.input_dim
                )));
            }
            if spec.classes_per_task != self.model.classes_per_task {
                return Err(Error::Config(format!(
                    "data.classes_per_task {} differs from model.classes_per_task {}",
                    spec.classes_per_task, self.model.classes_per_task
                )));
            }
        }
        if self.probes.is_empty() {
            return Err(Error::Config("at least one probe is required".into()));
        }
        for p in &self.probes {
            p.validate()?;
        }
        if !self.probes.iter().any(|p| p.kind == ProbeKind::Knn) && self.lr_policy == LrPolicy::Grid {
            return Err(Error::Config("grid learning-rate selection needs a knn probe".into()));
        }
        Ok(())
    }
}
