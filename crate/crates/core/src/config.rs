//! JSON run configuration shared by every CLI command.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{CriterionKind, EngineError, RunOptions, StoppingCriterion, DEFAULT_D_MAX};
use crate::grid::{ClampPolicy, GridError, GridSpec, InputGrid, InterpMode, RectGrid, StateGrid};
use crate::problem::{ControlProblem, CubicIntegrator, PolynomialProblem, ProblemError};
use crate::simulate::{InputSelection, DEFAULT_STEPS};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported schema version {0} (expected {SCHEMA_VERSION})")]
    Schema(u32),
    #[error("invalid {field}: {message}")]
    Invalid {
        field: &'static str,
        message: String,
    },
}

fn invalid(field: &'static str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    CubicIntegrator {
        #[serde(default = "default_input_bound")]
        input_bound: f64,
    },
    Polynomial {
        spec: PolynomialProblem<f64>,
    },
}

fn default_input_bound() -> f64 {
    20.0
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Box<dyn ControlProblem<f64>>, ConfigError> {
        match self {
            ProblemConfig::CubicIntegrator { input_bound } => {
                if !(input_bound.is_finite() && *input_bound > 0.0) {
                    return Err(invalid(
                        "problem.input_bound",
                        "must be positive and finite",
                    ));
                }
                Ok(Box::new(CubicIntegrator::new(*input_bound)))
            }
            ProblemConfig::Polynomial { spec } => {
                spec.validate()
                    .map_err(|e: ProblemError| invalid("problem.spec", e.to_string()))?;
                Ok(Box::new(spec.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionName {
    Uniform,
    Relative,
    MixedMin,
    MaxUniformRelative,
    QuadraticForm,
}

impl CriterionName {
    pub fn label(self) -> &'static str {
        match self {
            CriterionName::Uniform => "uniform",
            CriterionName::Relative => "relative",
            CriterionName::MixedMin => "mixed_min",
            CriterionName::MaxUniformRelative => "max_uniform_relative",
            CriterionName::QuadraticForm => "quadratic_form",
        }
    }
}

/// `ε` as a scalar or a vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonSpec {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl EpsilonSpec {
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            EpsilonSpec::Scalar(e) => vec![*e],
            EpsilonSpec::Vector(v) => v.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriterionConfig {
    pub kind: CriterionName,
    pub epsilon: EpsilonSpec,
    /// Row-major weight matrix for `quadratic_form`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

impl CriterionConfig {
    pub fn scalar(kind: CriterionName, eps: f64) -> Self {
        CriterionConfig {
            kind,
            epsilon: EpsilonSpec::Scalar(eps),
            weights: None,
        }
    }

    pub fn build(&self) -> Result<StoppingCriterion<f64>, ConfigError> {
        let kind = match self.kind {
            CriterionName::Uniform => CriterionKind::Uniform,
            CriterionName::Relative => CriterionKind::Relative,
            CriterionName::MixedMin => CriterionKind::MixedMin,
            CriterionName::MaxUniformRelative => CriterionKind::MaxOfUniformRelative,
            CriterionName::QuadraticForm => CriterionKind::QuadraticForm {
                weights: self
                    .weights
                    .clone()
                    .ok_or_else(|| invalid("criterion.weights", "required for quadratic_form"))?,
            },
        };
        StoppingCriterion::new(kind, self.epsilon.to_vec())
            .map_err(|e: EngineError| invalid("criterion", e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub selection: InputSelection,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            x0: None,
            steps: DEFAULT_STEPS,
            selection: InputSelection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertifyConfig {
    #[serde(default = "one")]
    pub horizon_target: f64,
    #[serde(default = "default_delta")]
    pub semiglobal_delta: Option<f64>,
    #[serde(default = "default_margin")]
    pub proxy_margin: usize,
}

fn one() -> f64 {
    1.0
}

fn default_delta() -> Option<f64> {
    Some(1.0)
}

fn default_margin() -> usize {
    crate::certificates::DEFAULT_PROXY_MARGIN
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            horizon_target: 1.0,
            semiglobal_delta: default_delta(),
            proxy_margin: default_margin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub problem: ProblemConfig,
    pub state_grid: GridSpec<f64>,
    pub input_grid: GridSpec<f64>,
    pub criterion: CriterionConfig,
    /// `Δ` of the check region `{σ <= Δ}`; defaults to the largest node measure.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region_bound: Option<f64>,
    #[serde(default = "default_d_max")]
    pub d_max: usize,
    #[serde(default)]
    pub interp: InterpMode,
    #[serde(default)]
    pub clamp: ClampPolicy,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Seed for the sampling-based validators.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub certify: CertifyConfig,
}

fn default_d_max() -> usize {
    DEFAULT_D_MAX
}

fn default_workers() -> usize {
    1
}

impl RunConfig {
    /// Cubic integrator on `[-10,10] x [-1000,1000]` with `n²` nodes and `m`
    /// inputs on `[-20,20]`, starting simulations at `(10, -1000)`.
    pub fn cubic(n: usize, m: usize, criterion: CriterionConfig) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            problem: ProblemConfig::CubicIntegrator { input_bound: 20.0 },
            state_grid: GridSpec {
                lower: vec![-10.0, -1000.0],
                upper: vec![10.0, 1000.0],
                counts: vec![n, n],
            },
            input_grid: GridSpec {
                lower: vec![-20.0],
                upper: vec![20.0],
                counts: vec![m],
            },
            criterion,
            region_bound: None,
            d_max: DEFAULT_D_MAX,
            interp: InterpMode::Multilinear,
            clamp: ClampPolicy::ClampToBounds,
            workers: 1,
            out_dir: None,
            seed: 0,
            simulation: SimulationConfig {
                x0: Some(vec![10.0, -1000.0]),
                ..SimulationConfig::default()
            },
            certify: CertifyConfig::default(),
        }
    }

    /// Reference resolution: 340² nodes and 909 inputs.
    pub fn full(criterion: CriterionConfig) -> Self {
        Self::cubic(340, 909, criterion)
    }

    /// Reduced resolution: 100² nodes and 101 inputs.
    pub fn smoke(criterion: CriterionConfig) -> Self {
        Self::cubic(100, 101, criterion)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn grids(&self) -> Result<(StateGrid<f64>, InputGrid<f64>), ConfigError> {
        let g = |spec: &GridSpec<f64>, field| {
            RectGrid::try_from(spec.clone()).map_err(|e: GridError| invalid(field, e.to_string()))
        };
        Ok((
            g(&self.state_grid, "state_grid")?,
            g(&self.input_grid, "input_grid")?,
        ))
    }

    pub fn run_options(&self) -> RunOptions<f64> {
        RunOptions {
            region_bound: self.region_bound,
            d_max: self.d_max,
            workers: self.workers,
            interp: self.interp,
            clamp: self.clamp,
            keep_history: false,
        }
    }

    /// Checks every field against the preconditions of the modules that
    /// consume it.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::Schema(self.schema_version));
        }
        let p = self.problem.build()?;
        let (sg, ig) = self.grids()?;
        if sg.dim() != p.state_dim() {
            return Err(invalid(
                "state_grid",
                format!(
                    "dimension {} but the problem has {} states",
                    sg.dim(),
                    p.state_dim()
                ),
            ));
        }
        if ig.dim() != p.input_dim() {
            return Err(invalid(
                "input_grid",
                format!(
                    "dimension {} but the problem has {} inputs",
                    ig.dim(),
                    p.input_dim()
                ),
            ));
        }
        let bx = p.input_box();
        if !(bx.contains(ig.lower()) && bx.contains(ig.upper())) {
            return Err(invalid(
                "input_grid",
                "bounds exceed the admissible input set",
            ));
        }
        self.criterion.build()?;
        if let Some(b) = self.region_bound {
            if !(b.is_finite() && b > 0.0) {
                return Err(invalid("region_bound", "must be positive and finite"));
            }
        }
        if self.d_max < 1 {
            return Err(invalid("d_max", "must be at least 1"));
        }
        if self.workers < 1 {
            return Err(invalid("workers", "must be at least 1"));
        }
        if let Some(x0) = &self.simulation.x0 {
            if x0.len() != p.state_dim() || x0.iter().any(|v| !v.is_finite()) {
                return Err(invalid(
                    "simulation.x0",
                    "must be a finite state of the problem's dimension",
                ));
            }
        }
        if self.simulation.steps < 1 {
            return Err(invalid("simulation.steps", "must be at least 1"));
        }
        if !(self.certify.horizon_target > 0.0) {
            return Err(invalid("certify.horizon_target", "must be positive"));
        }
        if let Some(d) = self.certify.semiglobal_delta {
            if !(d > 0.0) {
                return Err(invalid("certify.semiglobal_delta", "must be positive"));
            }
        }
        Ok(())
    }
}
