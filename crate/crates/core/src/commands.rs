//! Command dispatch shared by the binary and the C ABI.

use crate::config::{Command, ConfigError, RunConfig, Study};
use crate::estimators::{self, EstimatorError, McConfig, McReport, Status};
use crate::geometry::GeometryError;
use crate::model::SdeSystem;
use crate::numeric;
use crate::stochastics::{filtered_flow, integrate, sample_noise, PathOptions};
use crate::verify::{tensors_at, verify_suite, VerifyOptions, TENSOR_CONVENTIONS};
use serde::Serialize;
use serde_json::{json, Value};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Runtime(String),
}

impl From<GeometryError> for RunError {
    fn from(e: GeometryError) -> Self {
        RunError::Runtime(e.to_string())
    }
}

impl From<EstimatorError> for RunError {
    fn from(e: EstimatorError) -> Self {
        match e {
            EstimatorError::Config(m) => RunError::Config(ConfigError::Invalid(m)),
            other => RunError::Runtime(other.to_string()),
        }
    }
}

impl RunError {
    /// Process exit code: 2 for configuration problems, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            RunError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub report: Value,
    pub passed: bool,
    pub summary: String,
    /// Per-path CSV, when a dump was requested.
    pub csv: Option<String>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Removes every `wall_time_s` field, leaving the deterministic part.
pub fn strip_timing(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("wall_time_s");
            map.values_mut().for_each(strip_timing);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timing),
        _ => {}
    }
}

fn to_value<T: Serialize>(t: &T) -> Value {
    serde_json::to_value(t).expect("reports serialize")
}

pub fn run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let started = Instant::now();
    let sys = cfg.build_system()?;
    let (result, passed, summary, csv) = match cfg.command {
        Command::Tensors => tensors(cfg, &sys)?,
        Command::Verify => verify(cfg, &sys)?,
        Command::Simulate => simulate(cfg, &sys)?,
        Command::Estimate => estimate(cfg, &sys)?,
    };
    let report = json!({
        "tool": "sdegeo",
        "version": env!("CARGO_PKG_VERSION"),
        "command": cfg.command,
        "scenario": cfg.scenario,
        "config": cfg,
        "passed": passed,
        "result": result,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    Ok(Outcome { report, passed, summary, csv })
}

type Parts = (Value, bool, String, Option<String>);

fn points(cfg: &RunConfig, sys: &SdeSystem) -> Result<Vec<crate::model::Point>, RunError> {
    cfg.points
        .iter()
        .enumerate()
        .map(|(i, c)| {
            sys.point_from_coords(c)
                .map_err(|e| RunError::Config(ConfigError::Field { path: format!("points[{i}]"), message: e.to_string() }))
        })
        .collect()
}

fn tensors(cfg: &RunConfig, sys: &SdeSystem) -> Result<Parts, RunError> {
    let pts = points(cfg, sys)?;
    if pts.is_empty() {
        return Err(ConfigError::Field { path: "points".into(), message: "tensors needs at least one point".into() }.into());
    }
    let dumps = pts.iter().map(|p| tensors_at(sys, p, cfg.p, cfg.seed)).collect::<Result<Vec<_>, _>>()?;
    let summary = format!("tensors [{}]: {} point(s), p = {}\n", sys.name, dumps.len(), cfg.p);
    Ok((json!({ "conventions": TENSOR_CONVENTIONS, "points": dumps }), true, summary, None))
}

fn verify(cfg: &RunConfig, sys: &SdeSystem) -> Result<Parts, RunError> {
    let pts = points(cfg, sys)?;
    let opts = VerifyOptions { points: cfg.verify_points, probes: cfg.verify_probes, seed: cfg.seed };
    let r = verify_suite(sys, &pts, opts)?;
    let mut summary = format!(
        "verify [{}]: {:?}  lw_equals_lc={} curvature_zero={} tss={} adjoint_metric={}\n",
        r.scenario, r.status, r.lw_equals_lc, r.curvature_zero, r.tss, r.adjoint_metric
    );
    for c in &r.checks {
        summary.push_str(&format!("  {} {}: {:.3e} (tol {:.1e})\n", if c.pass { "ok  " } else { "FAIL" }, c.name, c.estimate, c.tolerance));
    }
    Ok((to_value(&r), r.passed(), summary, None))
}

#[derive(Debug, Clone, Serialize)]
struct SimulationSummary {
    status: Status,
    paths: usize,
    dropped_paths: usize,
    steps: usize,
    observable_mean: Vec<f64>,
    observable_se: Vec<f64>,
    mean_jacobian_norm: f64,
    mean_filtered_norm: f64,
    max_isometry_defect: f64,
}

fn simulate(cfg: &RunConfig, sys: &SdeSystem) -> Result<Parts, RunError> {
    let mc = cfg.mc_config(sys)?;
    let steps = (mc.t / mc.dt).round() as usize;
    let adjoint_metric = estimators::adjoint_is_metric(sys, &mc)?;
    let (rows, dropped) = estimators::fan_out(mc.n_paths, |i| {
        let noise = sample_noise(mc.seed, i, steps, mc.dt, sys.m);
        let path = integrate(sys, &mc.x0, &noise, PathOptions::all(), adjoint_metric);
        if !path.alive() {
            return Ok(None);
        }
        let w = filtered_flow(&path)?;
        let end = path.last();
        let lg = &path.geometry[end];
        let mut row: Vec<f64> = sys.observable(&path.points[end]).iter().copied().collect();
        row.push(lg.norm(&(&path.jacobians[end] * &mc.v0)));
        row.push(lg.norm(&(&w[end] * &mc.v0)));
        row.push(path.isometry_defect);
        Ok(Some(row))
    })?;
    let d = sys.observable_dim();
    let col = |j: usize| rows.iter().map(|r| r[j]).collect::<Vec<_>>();
    let stats: Vec<(f64, f64)> = (0..d).map(|j| numeric::mean_and_se(&col(j))).collect();
    let total = rows.len() + dropped;
    let s = SimulationSummary {
        status: if (rows.len() as f64) < estimators::MIN_ALIVE * total as f64 { Status::TooFewAlivePaths } else { Status::Pass },
        paths: rows.len(),
        dropped_paths: dropped,
        steps,
        observable_mean: stats.iter().map(|s| s.0).collect(),
        observable_se: stats.iter().map(|s| s.1).collect(),
        mean_jacobian_norm: numeric::mean_and_se(&col(d)).0,
        mean_filtered_norm: numeric::mean_and_se(&col(d + 1)).0,
        max_isometry_defect: col(d + 2).into_iter().fold(0.0, f64::max),
    };
    let summary = format!(
        "simulate [{}]: {:?} ({} paths, {} dropped)\n  E[observable(x_t)] = {:?}\n  mean |J v0| = {:.6}, mean |W v0| = {:.6}\n",
        sys.name, s.status, s.paths, s.dropped_paths, s.observable_mean, s.mean_jacobian_norm, s.mean_filtered_norm
    );
    let csv = dump_csv(cfg, sys, &mc, steps, adjoint_metric)?;
    Ok((to_value(&s), s.status == Status::Pass, summary, csv))
}

/// CSV rows `path, t, chart, x…, J…, |W|, alive` for the first
/// `output.dump_paths` paths (default 10), on the same noise as the study.
fn dump_csv(cfg: &RunConfig, sys: &SdeSystem, mc: &McConfig, steps: usize, adjoint_metric: bool) -> Result<Option<String>, RunError> {
    if cfg.output.paths_csv.is_none() {
        return Ok(None);
    }
    let count = cfg.output.dump_paths.unwrap_or(10).min(mc.n_paths);
    let n = sys.n;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["path".to_string(), "t".into(), "chart".into()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    for i in 1..=n {
        header.extend((1..=n).map(|j| format!("J{i}{j}")));
    }
    header.push("W".into());
    header.push("alive".into());
    let io = |e: csv::Error| RunError::Runtime(e.to_string());
    w.write_record(&header).map_err(io)?;
    for i in 0..count as u64 {
        let noise = sample_noise(mc.seed, i, steps, mc.dt, sys.m);
        let path = integrate(sys, &mc.x0, &noise, PathOptions::all(), adjoint_metric);
        let filtered = filtered_flow(&path)?;
        for k in 0..=path.last() {
            let lg = &path.geometry[k];
            let mut rec = vec![i.to_string(), format!("{}", path.time(k)), path.points[k].chart.label().to_string()];
            rec.extend(path.points[k].x.iter().map(|v| format!("{v}")));
            let j = &path.jacobians[k];
            for r in 0..n {
                rec.extend((0..n).map(|c| format!("{}", j[(r, c)])));
            }
            rec.push(format!("{}", lg.norm(&(&filtered[k] * &mc.v0))));
            rec.push((path.alive() || k < path.last()).to_string());
            w.write_record(&rec).map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| RunError::Runtime(e.to_string()))?;
    Ok(Some(String::from_utf8(bytes).expect("csv is utf-8")))
}

fn first_function(cfg: &RunConfig) -> Result<crate::expr::Expr, RunError> {
    cfg.parsed_functions()?
        .into_iter()
        .next()
        .ok_or_else(|| ConfigError::Field { path: "functions".into(), message: "this study needs a test function".into() }.into())
}

fn estimate(cfg: &RunConfig, sys: &SdeSystem) -> Result<Parts, RunError> {
    let study = cfg.require_study()?;
    let mc = cfg.mc_config(sys)?;
    let report: McReport = match study {
        Study::Filtered => {
            let fs = cfg.parsed_functions()?;
            if fs.is_empty() {
                return Err(ConfigError::Field { path: "functions".into(), message: "filtered needs a test-function panel".into() }.into());
            }
            estimators::filtered_expectation_check(sys, &mc, &fs)?
        }
        Study::Bismut => estimators::bismut_gradient(sys, &mc, &first_function(cfg)?)?,
        Study::Moments => estimators::moment_sandwich(sys, &mc, cfg.p)?,
        Study::Generator => estimators::generator_check(sys, &mc, &first_function(cfg)?)?,
        Study::Oneform => {
            let form = cfg.parsed_form()?;
            if form.is_empty() {
                return Err(ConfigError::Field { path: "form".into(), message: "oneform needs a 1-form".into() }.into());
            }
            let potential = cfg.parsed_functions()?.into_iter().next();
            estimators::one_form_semigroup_check(sys, &mc, &form, potential.as_ref())?
        }
        Study::Bochner => estimators::bochner_decay_check(sys, &mc, cfg.expected_slope)?,
        Study::Decompose => estimators::decomposition_check(sys, &mc)?,
        Study::CovariantFlow => estimators::covariant_flow_check(sys, &mc)?,
    };
    let steps = (mc.t / mc.dt).round() as usize;
    let csv = if cfg.output.paths_csv.is_some() {
        dump_csv(cfg, sys, &mc, steps, estimators::adjoint_is_metric(sys, &mc)?)?
    } else {
        None
    };
    Ok((to_value(&report), report.passed(), report.summary(), csv))
}
