use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::SgdConfig;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sgd")]
    Sgd,
    #[serde(rename = "lpft")]
    Lpft,
    #[serde(rename = "si")]
    Si,
    #[serde(rename = "der")]
    Der,
    #[serde(rename = "si+lpft")]
    SiLpft,
    #[serde(rename = "der+lpft")]
    DerLpft,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Sgd,
        Method::Lpft,
        Method::Si,
        Method::Der,
        Method::SiLpft,
        Method::DerLpft,
    ];

    /// Whether each task starts with a head-only phase on a frozen extractor.
    pub fn has_lp_phase(self) -> bool {
        matches!(self, Method::Lpft | Method::SiLpft | Method::DerLpft)
    }

    pub fn uses_si(self) -> bool {
        matches!(self, Method::Si | Method::SiLpft)
    }

    pub fn uses_replay(self) -> bool {
        matches!(self, Method::Der | Method::DerLpft)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Sgd => "sgd",
            Method::Lpft => "lpft",
            Method::Si => "si",
            Method::Der => "der",
            Method::SiLpft => "si+lpft",
            Method::DerLpft => "der+lpft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// How the head-only phase of LP-FT is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpSolver {
    /// Minibatch SGD for `lp_epochs`.
    #[default]
    Sgd,
    /// Full-batch L-BFGS logistic regression with a regularization sweep.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointStrategy {
    /// Carry the end-of-task parameters forward.
    #[default]
    Last,
    /// Carry forward the epoch snapshot with the best mean test accuracy over
    /// the tasks seen so far.
    BestAvg,
}

/// Method-specific knobs. Unset fields take the defaults below; setting a knob
/// the chosen method does not use is a configuration error.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodParams {
    /// SI regularization strength `c`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_c: Option<f64>,
    /// SI damping `xi`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub si_xi: Option<f64>,
    /// DER logit-matching weight `alpha`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der_alpha: Option<f64>,
    /// DER buffer capacity `M`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub der_capacity: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lp_solver: Option<LpSolver>,
}

pub const DEFAULT_SI_C: f64 = 1.0;
pub const DEFAULT_SI_XI: f64 = 1.0;
pub const DEFAULT_DER_ALPHA: f64 = 0.5;
pub const DEFAULT_DER_CAPACITY: usize = 500;

impl MethodParams {
    pub fn si_c(&self) -> f64 {
        self.si_c.unwrap_or(DEFAULT_SI_C)
    }

    pub fn si_xi(&self) -> f64 {
        self.si_xi.unwrap_or(DEFAULT_SI_XI)
    }

    pub fn der_alpha(&self) -> f64 {
        self.der_alpha.unwrap_or(DEFAULT_DER_ALPHA)
    }

    pub fn der_capacity(&self) -> usize {
        self.der_capacity.unwrap_or(DEFAULT_DER_CAPACITY)
    }

    pub fn lp_solver(&self) -> LpSolver {
        self.lp_solver.unwrap_or_default()
    }

    pub fn validate_for(&self, method: Method) -> Result<()> {
        let reject = |key: &str| {
            Err(Error::Config(format!(
                "method_params.{key} does not apply to method {method}"
            )))
        };
        if !method.uses_si() {
            if self.si_c.is_some() {
                return reject("si_c");
            }
            if self.si_xi.is_some() {
                return reject("si_xi");
            }
        }
        if !method.uses_replay() {
            if self.der_alpha.is_some() {
                return reject("der_alpha");
            }
            if self.der_capacity.is_some() {
                return reject("der_capacity");
            }
        }
        if !method.has_lp_phase() && self.lp_solver.is_some() {
            return reject("lp_solver");
        }
        if !(self.si_c() >= 0.0) {
            return Err(Error::Config("si_c must be non-negative".into()));
        }
        if !(self.si_xi() > 0.0) {
            return Err(Error::Config("si_xi must be positive".into()));
        }
        if !(self.der_alpha() >= 0.0) {
            return Err(Error::Config("der_alpha must be non-negative".into()));
        }
        Ok(())
    }

    /// Copy with only the knobs `method` understands.
    pub fn restricted_to(&self, method: Method) -> Self {
        Self {
            si_c: self.si_c.filter(|_| method.uses_si()),
            si_xi: self.si_xi.filter(|_| method.uses_si()),
            der_alpha: self.der_alpha.filter(|_| method.uses_replay()),
            der_capacity: self.der_capacity.filter(|_| method.uses_replay()),
            lp_solver: self.lp_solver.filter(|_| method.has_lp_phase()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs per task for methods without a head-only phase.
    #[serde(default = "default_epochs")]
    pub epochs_per_task: usize,
    #[serde(default = "default_phase_epochs")]
    pub lp_epochs: usize,
    #[serde(default = "default_phase_epochs")]
    pub ft_epochs: usize,
    #[serde(default)]
    pub sgd: SgdConfig,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub method_params: MethodParams,
    #[serde(default)]
    pub checkpoint_strategy: CheckpointStrategy,
    #[serde(default)]
    pub seed: u64,
}

fn default_epochs() -> usize {
    50
}

fn default_phase_epochs() -> usize {
    25
}

fn default_method() -> Method {
    Method::Sgd
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_per_task: default_epochs(),
            lp_epochs: default_phase_epochs(),
            ft_epochs: default_phase_epochs(),
            sgd: SgdConfig::default(),
            method: default_method(),
            method_params: MethodParams::default(),
            checkpoint_strategy: CheckpointStrategy::Last,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sgd.validate()?;
        self.method_params.validate_for(self.method)
    }

    /// Method name for reports; the L-BFGS head solver is marked `+sk`.
    pub fn label(&self) -> String {
        if self.method.has_lp_phase() && self.method_params.lp_solver() == LpSolver::Lbfgs {
            format!("{}+sk", self.method)
        } else {
            self.method.to_string()
        }
    }

    pub fn for_method(&self, method: Method) -> Self {
        Self {
            method,
            method_params: self.method_params.restricted_to(method),
            ..self.clone()
        }
    }
}
