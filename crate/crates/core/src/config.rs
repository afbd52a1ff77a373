//! Run configuration: JSON Schema validation, then typed deserialization.

use crate::estimators::McConfig;
use crate::expr::Expr;
use crate::model::{build_scenario_with, ModelError, ScenarioSpec, SdeSystem};
use crate::numeric::{DerivOracle, Vector};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// The published schema, also shipped as `docs/config.schema.json`.
pub const SCHEMA: &str = include_str!("../../../docs/config.schema.json");

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid JSON: {0}")]
    Json(String),
    #[error("schema violation at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("at `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Tensors,
    Verify,
    Simulate,
    Estimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    Filtered,
    Bismut,
    Moments,
    Generator,
    Oneform,
    Bochner,
    Decompose,
    CovariantFlow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default = "default_h0")]
    pub h0: f64,
    #[serde(default = "default_levels")]
    pub richardson_levels: u32,
}

fn default_h0() -> f64 {
    DerivOracle::default().h0
}

fn default_levels() -> u32 {
    DerivOracle::default().richardson_levels
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    pub report: Option<String>,
    pub paths_csv: Option<String>,
    pub dump_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub scenario: ScenarioSpec,
    #[serde(default)]
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub x0: Option<Vec<f64>>,
    #[serde(default)]
    pub v0: Option<Vec<f64>>,
    #[serde(default)]
    pub study: Option<Study>,
    #[serde(default)]
    pub functions: Vec<String>,
    #[serde(default)]
    pub form: Vec<String>,
    #[serde(default = "default_t")]
    pub t: f64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_paths")]
    pub n_paths: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_k")]
    pub k_se: f64,
    #[serde(default)]
    pub expected_slope: Option<f64>,
    #[serde(default = "default_verify_points")]
    pub verify_points: usize,
    #[serde(default = "default_verify_probes")]
    pub verify_probes: usize,
    #[serde(default)]
    pub oracle: Option<OracleSpec>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_t() -> f64 {
    0.5
}
fn default_dt() -> f64 {
    1e-3
}
fn default_paths() -> usize {
    1000
}
fn default_p() -> f64 {
    2.0
}
fn default_k() -> f64 {
    3.0
}
fn default_verify_points() -> usize {
    5
}
fn default_verify_probes() -> usize {
    100
}

/// Scalar fields that command-line flags may override.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub command: Option<Command>,
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub dt: Option<f64>,
    pub t: Option<f64>,
    pub out: Option<String>,
    pub dump_paths: Option<String>,
}

fn schema_errors(instance: &serde_json::Value) -> Result<(), ConfigError> {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    let mut errors: Vec<(String, String)> = validator
        .iter_errors(instance)
        .map(|e| {
            let path = e.instance_path.to_string();
            (if path.is_empty() { "/".to_string() } else { path }, e.to_string())
        })
        .collect();
    if errors.is_empty() {
        return Ok(());
    }
    // Deepest path first: the most specific complaint is the useful one.
    errors.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.cmp(b)));
    let (path, message) = errors.swap_remove(0);
    Err(ConfigError::Schema { path, message })
}

/// Validates `text` against the schema and deserializes it.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ConfigError::Json(e.to_string()))?;
    schema_errors(&value)?;
    serde_path_to_error::deserialize(value).map_err(|e| ConfigError::Field {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse_config(&text)
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(c) = o.command {
            self.command = c;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.paths {
            self.n_paths = p;
        }
        if let Some(dt) = o.dt {
            self.dt = dt;
        }
        if let Some(t) = o.t {
            self.t = t;
        }
        if let Some(out) = &o.out {
            self.output.report = Some(out.clone());
        }
        if let Some(d) = &o.dump_paths {
            self.output.paths_csv = Some(d.clone());
        }
    }

    pub fn oracle(&self) -> Result<DerivOracle, ConfigError> {
        match self.oracle {
            None => Ok(DerivOracle::default()),
            Some(o) => DerivOracle::new(o.h0, o.richardson_levels).map_err(ConfigError::Invalid),
        }
    }

    pub fn build_system(&self) -> Result<SdeSystem, ConfigError> {
        Ok(build_scenario_with(&self.scenario, self.oracle()?)?)
    }

    fn field<T>(path: &str, r: Result<T, impl std::fmt::Display>) -> Result<T, ConfigError> {
        r.map_err(|e| ConfigError::Field { path: path.into(), message: e.to_string() })
    }

    pub fn parsed_functions(&self) -> Result<Vec<Expr>, ConfigError> {
        self.functions.iter().enumerate().map(|(i, s)| Self::field(&format!("functions[{i}]"), Expr::parse(s))).collect()
    }

    pub fn parsed_form(&self) -> Result<Vec<Expr>, ConfigError> {
        self.form.iter().enumerate().map(|(i, s)| Self::field(&format!("form[{i}]"), Expr::parse(s))).collect()
    }

    /// Monte Carlo parameters, with command-specific requirements checked.
    pub fn mc_config(&self, sys: &SdeSystem) -> Result<McConfig, ConfigError> {
        let x0 = self.x0.as_ref().ok_or_else(|| ConfigError::Field { path: "x0".into(), message: "required for Monte Carlo commands".into() })?;
        let x0 = Self::field("x0", sys.point_from_coords(x0))?;
        let v0 = match &self.v0 {
            Some(v) if v.len() != sys.n => {
                return Err(ConfigError::Field { path: "v0".into(), message: format!("expected {} components, got {}", sys.n, v.len()) })
            }
            Some(v) if v.iter().all(|c| *c == 0.0) => {
                return Err(ConfigError::Field { path: "v0".into(), message: "must be nonzero".into() })
            }
            Some(v) => Vector::from_column_slice(v),
            None => Vector::from_fn(sys.n, |i, _| if i == 0 { 1.0 } else { 0.0 }),
        };
        let mc = McConfig { x0, v0, t: self.t, dt: self.dt, n_paths: self.n_paths, seed: self.seed, k_se: self.k_se };
        if self.command == Command::Estimate {
            Self::field("n_paths", mc.steps())?;
        } else {
            let ratio = self.t / self.dt;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                return Err(ConfigError::Field { path: "dt".into(), message: format!("t/dt must be a positive integer, got {ratio}") });
            }
        }
        Ok(mc)
    }

    pub fn require_study(&self) -> Result<Study, ConfigError> {
        self.study.ok_or_else(|| ConfigError::Field { path: "study".into(), message: "required for estimate".into() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(r#"{"command": "verify", "scenario": {"name": "sphere-gradient"}}"#).unwrap();
        assert_eq!(c.scenario, ScenarioSpec::SphereGradient { n: 2 });
        assert_eq!((c.t, c.dt, c.n_paths, c.seed, c.k_se), (0.5, 1e-3, 1000, 0, 3.0));
    }

    #[test]
    fn missing_scenario_is_named() {
        let e = parse_config(r#"{"command": "verify"}"#).unwrap_err();
        assert!(matches!(&e, ConfigError::Schema { .. }));
        assert!(e.to_string().contains("scenario"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = parse_config(r#"{"command": "verify", "scenario": {"name": "circle"}, "colour": 1}"#).unwrap_err();
        assert!(e.to_string().contains("colour"), "{e}");
        let e = parse_config(r#"{"command": "verify", "scenario": {"name": "twisted-plane", "alpha": 1, "beta": 2}}"#).unwrap_err();
        assert!(e.to_string().contains("beta"), "{e}");
        let e = parse_config(r#"{"command": "verify", "scenario": {"name": "torus"}}"#).unwrap_err();
        assert!(e.to_string().contains("/scenario/name"), "{e}");
    }

    #[test]
    fn estimate_refuses_few_paths() {
        let mut c = parse_config(
            r#"{"command": "estimate", "study": "moments", "scenario": {"name": "sphere-gradient"}, "x0": [0, 0, 1], "n_paths": 10}"#,
        )
        .unwrap();
        let sys = c.build_system().unwrap();
        let e = c.mc_config(&sys).unwrap_err();
        assert!(e.to_string().contains("n_paths"), "{e}");
        c.apply(&Overrides { paths: Some(200), ..Default::default() });
        assert_eq!(c.mc_config(&sys).unwrap().n_paths, 200);
    }

    #[test]
    fn bad_expressions_name_their_field() {
        let c = parse_config(r#"{"command": "estimate", "scenario": {"name": "circle"}, "functions": ["x1", "sin("]}"#).unwrap();
        let e = c.parsed_functions().unwrap_err();
        assert!(e.to_string().contains("functions[1]"), "{e}");
    }
}
