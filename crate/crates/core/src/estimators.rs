//! Monte Carlo studies with standard errors and verdicts.
//!
//! Every study fans paths out over the rayon pool, collects per-path
//! results in path-index order and reduces them with pairwise summation, so
//! reports do not depend on the number of worker threads.

use crate::expr::{Expr, ExprError};
use crate::geometry::{
    self, adjoint_christoffel, chart_one_form, chart_scalar, metricity_check, GeometryError, HpForm, LocalGeometry,
};
use crate::model::{ModelError, Point, SdeSystem};
use crate::numeric::{self, Mat, Vector};
use crate::stochastics::{
    covariant_derivative_flow, filtered_flow, integrate, noise_decompose, sample_noise, FlowPath, NoiseGrid,
    PathOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::time::Instant;
use thiserror::Error;

/// Absolute slack added to every tolerance, so exact identities evaluated
/// in floating point do not fail on rounding.
pub const FLOOR: f64 = 1e-12;

/// Smallest alive fraction for which a study reports a verdict.
pub const MIN_ALIVE: f64 = 0.9;

/// Stream offset separating auxiliary randomness (probe points, search
/// starts) from path noise.
const AUX_STREAM: u64 = 1 << 62;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("invalid Monte Carlo configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

impl From<ModelError> for EstimatorError {
    fn from(e: ModelError) -> Self {
        EstimatorError::Geometry(e.into())
    }
}

impl From<ExprError> for EstimatorError {
    fn from(e: ExprError) -> Self {
        EstimatorError::Geometry(ModelError::Eval(e).into())
    }
}

pub type EResult<T> = Result<T, EstimatorError>;

#[derive(Debug, Clone)]
pub struct McConfig {
    pub x0: Point,
    pub v0: Vector,
    pub t: f64,
    pub dt: f64,
    pub n_paths: usize,
    pub seed: u64,
    /// Standard-error multiplier in verdicts.
    pub k_se: f64,
}

impl McConfig {
    /// Number of grid steps; enforces `n_paths ≥ 100` and `t/dt` integral.
    pub fn steps(&self) -> EResult<usize> {
        if self.n_paths < 100 {
            return Err(EstimatorError::Config(format!("n_paths must be at least 100, got {}", self.n_paths)));
        }
        if !(self.dt > 0.0 && self.t > 0.0) {
            return Err(EstimatorError::Config("t and dt must be positive".into()));
        }
        let r = self.t / self.dt;
        let steps = r.round();
        if (r - steps).abs() > 1e-9 * r.max(1.0) || steps < 1.0 {
            return Err(EstimatorError::Config(format!("t/dt must be a positive integer, got {r}")));
        }
        if !(self.k_se >= 0.0) {
            return Err(EstimatorError::Config("k_se must be non-negative".into()));
        }
        Ok(steps as usize)
    }

    fn noise(&self, sys: &SdeSystem, index: u64, steps: usize) -> NoiseGrid {
        sample_noise(self.seed, index, steps, self.dt, sys.m)
    }

    fn aux_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(AUX_STREAM);
        rng
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Analytic,
    DerivedOracle,
    Statistical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Relation {
    /// `|estimate − reference| ≤ tolerance`
    Equal,
    /// `estimate ≥ reference − tolerance`
    AtLeast,
    /// `estimate ≤ reference + tolerance`
    AtMost,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub reference: f64,
    pub provenance: Provenance,
    pub relation: Relation,
    pub k_se: f64,
    pub bias_allowance: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: impl Into<String>,
        estimate: f64,
        standard_error: f64,
        reference: f64,
        provenance: Provenance,
        relation: Relation,
        k_se: f64,
        bias_allowance: f64,
    ) -> Self {
        let se = if standard_error.is_finite() { standard_error } else { 0.0 };
        let tolerance = k_se * se + bias_allowance + FLOOR;
        let pass = match relation {
            Relation::Equal => (estimate - reference).abs() <= tolerance,
            Relation::AtLeast => estimate >= reference - tolerance,
            Relation::AtMost => estimate <= reference + tolerance,
        };
        Check {
            name: name.into(),
            estimate,
            standard_error,
            reference,
            provenance,
            relation,
            k_se,
            bias_allowance,
            tolerance,
            pass,
        }
    }

    /// A deterministic comparison against a fixed tolerance.
    pub fn exact(name: impl Into<String>, estimate: f64, reference: f64, relation: Relation, tol: f64, provenance: Provenance) -> Self {
        Check::new(name, estimate, 0.0, reference, provenance, relation, 0.0, tol)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    Fail,
    NotApplicable,
    TooFewAlivePaths,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McReport {
    pub study: String,
    pub scenario: String,
    pub status: Status,
    pub checks: Vec<Check>,
    pub paths: usize,
    pub dropped_paths: usize,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

impl McReport {
    fn new(study: &str, sys: &SdeSystem) -> Self {
        McReport {
            study: study.into(),
            scenario: sys.name.clone(),
            status: Status::Pass,
            checks: Vec::new(),
            paths: 0,
            dropped_paths: 0,
            notes: Vec::new(),
            wall_time_s: 0.0,
        }
    }

    fn not_applicable(study: &str, sys: &SdeSystem, why: String) -> Self {
        let mut r = McReport::new(study, sys);
        r.status = Status::NotApplicable;
        r.notes.push(why);
        r
    }

    fn finish(mut self, started: Instant) -> Self {
        self.wall_time_s = started.elapsed().as_secs_f64();
        let total = self.paths + self.dropped_paths;
        self.status = if self.status == Status::NotApplicable {
            Status::NotApplicable
        } else if total > 0 && (self.paths as f64) < MIN_ALIVE * total as f64 {
            for c in &mut self.checks {
                c.pass = false;
            }
            Status::TooFewAlivePaths
        } else if self.checks.iter().all(|c| c.pass) {
            Status::Pass
        } else {
            Status::Fail
        };
        self
    }

    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }

    /// One line per check, for terminal output.
    pub fn summary(&self) -> String {
        let mut out = format!("{} [{}]: {:?} ({} paths, {} dropped, {:.2}s)\n", self.study, self.scenario, self.status, self.paths, self.dropped_paths, self.wall_time_s);
        for c in &self.checks {
            out.push_str(&format!(
                "  {} {}: estimate {:.6e} ± {:.2e} vs {:.6e} (tol {:.2e})\n",
                if c.pass { "ok  " } else { "FAIL" },
                c.name,
                c.estimate,
                c.standard_error,
                c.reference,
                c.tolerance
            ));
        }
        for n in &self.notes {
            out.push_str(&format!("  note: {n}\n"));
        }
        out
    }
}

/// Runs `f` for every path index; `None` marks a dropped (dead) path.
pub(crate) fn fan_out<T, F>(n: usize, f: F) -> EResult<(Vec<T>, usize)>
where
    T: Send,
    F: Fn(u64) -> EResult<Option<T>> + Sync + Send,
{
    let results: Vec<Option<T>> = (0..n as u64).into_par_iter().map(&f).collect::<EResult<_>>()?;
    let dropped = results.iter().filter(|r| r.is_none()).count();
    Ok((results.into_iter().flatten().collect(), dropped))
}

fn column(rows: &[Vec<f64>], j: usize) -> Vec<f64> {
    rows.iter().map(|r| r[j]).collect()
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn mean(xs: &[f64]) -> f64 {
    numeric::mean_and_se(xs).0
}

/// `f` evaluated at a point, with `f` written in observable coordinates.
pub fn eval_scalar(sys: &SdeSystem, f: &Expr, p: &Point) -> EResult<f64> {
    Ok(f.eval(sys.observable(p).as_slice())?)
}

/// `φ_x(w)` for a 1-form written in observable coordinates.
pub fn eval_form(sys: &SdeSystem, phi: &[Expr], p: &Point, w: &Vector) -> EResult<f64> {
    let obs = sys.observable(p);
    let omega = Vector::from_iterator(phi.len(), phi.iter().map(|e| e.eval(obs.as_slice())).collect::<Result<Vec<_>, _>>()?);
    Ok(omega.dot(&(sys.observable_jacobian(p) * w)))
}

fn check_form_dim(sys: &SdeSystem, phi: &[Expr]) -> EResult<()> {
    if phi.len() != sys.observable_dim() {
        return Err(EstimatorError::Config(format!(
            "1-form needs {} components (observable coordinates), got {}",
            sys.observable_dim(),
            phi.len()
        )));
    }
    Ok(())
}

fn check_v0(sys: &SdeSystem, v0: &Vector) -> EResult<()> {
    if v0.len() != sys.n || v0.norm() == 0.0 {
        return Err(EstimatorError::Config(format!("v0 must be a nonzero vector of length {}", sys.n)));
    }
    Ok(())
}

/// Metricity of the adjoint connection at `x₀` and five sampled points.
pub fn adjoint_is_metric(sys: &SdeSystem, cfg: &McConfig) -> EResult<bool> {
    let mut rng = cfg.aux_rng();
    let mut probes = vec![cfg.x0.clone()];
    for _ in 0..5 {
        probes.push(sys.sample_point(&mut rng));
    }
    for p in &probes {
        let gamma = adjoint_christoffel(sys, p)?;
        if metricity_check(sys, p, &gamma, &mut rng, 10)?.norm_form > 1e-6 {
            return Ok(false);
        }
    }
    Ok(true)
}

fn full_path(sys: &SdeSystem, cfg: &McConfig, noise: &NoiseGrid, adjoint_metric: bool) -> Option<FlowPath> {
    let path = integrate(sys, &cfg.x0, noise, PathOptions::all(), adjoint_metric);
    path.alive().then_some(path)
}

/// `E[f(x_t)⟨Tξ_t v₀ − W_t v₀, //̂_t u⟩]` for a panel of test functions and
/// frame vectors `u = e_j`, and the unconditional mean of
/// `//̂_t⁻¹(Tξ_t v₀ − W_t v₀)`. The filtered flow is the conditional
/// expectation of the derivative flow given the one-point motion, so all
/// of these vanish.
pub fn filtered_expectation_check(sys: &SdeSystem, cfg: &McConfig, fs: &[Expr]) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let n = sys.n;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some(path) = full_path(sys, cfg, &noise, adjoint_metric) else { return Ok(None) };
        let w = filtered_flow(&path)?;
        let end = path.last();
        let d = (&path.jacobians[end] - &w[end]) * &cfg.v0;
        let adj = &path.adjoint_transport[end];
        let lg = &path.geometry[end];
        let mut row = Vec::with_capacity(fs.len() * n + n + 1);
        for f in fs {
            let fx = eval_scalar(sys, f, &path.points[end])?;
            for j in 0..n {
                row.push(fx * lg.inner(&d, &adj.column(j).into_owned()));
            }
        }
        row.extend((numeric::inverse(adj).map_err(GeometryError::from)? * &d).iter());
        row.push(lg.norm(&d));
        Ok(Some(row))
    })?;
    let mut report = McReport::new("filtered", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let mut idx = 0;
    for (fi, _) in fs.iter().enumerate() {
        for j in 0..n {
            let (m, se) = numeric::mean_and_se(&column(&rows, idx));
            report.checks.push(Check::new(
                format!("E[f{fi}(x_t) <Tξv - Wv, //^ e{j}>]"),
                m,
                se,
                0.0,
                Provenance::Statistical,
                Relation::Equal,
                cfg.k_se,
                0.0,
            ));
            idx += 1;
        }
    }
    for j in 0..n {
        let (m, se) = numeric::mean_and_se(&column(&rows, idx));
        report.checks.push(Check::new(
            format!("E[(//^)^-1 (Tξv - Wv)]_{j}"),
            m,
            se,
            0.0,
            Provenance::Statistical,
            Relation::Equal,
            cfg.k_se,
            0.0,
        ));
        idx += 1;
    }
    let max_gap = column(&rows, idx).into_iter().fold(0.0, f64::max);
    report.notes.push(format!("max pathwise |Tξ_t v0 - W_t v0|_g = {max_gap:e}"));
    report.notes.push(format!("adjoint connection treated as metric: {adjoint_metric}"));
    Ok(report.finish(started))
}

/// Largest `|Tξ_t v₀ − W_t v₀|_g` at the final time over `paths` paths.
pub fn pathwise_filtered_gap(sys: &SdeSystem, cfg: &McConfig, paths: usize) -> EResult<f64> {
    let steps = cfg.steps()?;
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let (gaps, _) = fan_out(paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some(path) = full_path(sys, cfg, &noise, adjoint_metric) else { return Ok(None) };
        let w = filtered_flow(&path)?;
        let end = path.last();
        Ok(Some(path.geometry[end].norm(&((&path.jacobians[end] - &w[end]) * &cfg.v0))))
    })?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

/// `d(P_t f)(v₀)` at `x₀` by a truncated wrapped-Gaussian series, for the
/// circle with `X = ∂θ`: `∫ f(θ) Σ_k (s + 2πk)/t φ_t(s + 2πk) dθ` with
/// `s = θ − θ₀`, periodic trapezoid rule on 4096 nodes, `|k| ≤ 3`.
pub fn circle_series_gradient(f: &Expr, theta0: f64, t: f64) -> EResult<f64> {
    let nodes = 4096;
    let h = 2.0 * std::f64::consts::PI / nodes as f64;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * t).sqrt();
    let mut vals = Vec::with_capacity(nodes);
    for q in 0..nodes {
        let s = -std::f64::consts::PI + q as f64 * h;
        let theta = theta0 + s;
        let fx = f.eval(&[theta.cos(), theta.sin()])?;
        let mut kern = 0.0;
        for k in -3..=3 {
            let y = s + 2.0 * std::f64::consts::PI * k as f64;
            kern += y / t * norm * (-y * y / (2.0 * t)).exp();
        }
        vals.push(fx * kern * h);
    }
    Ok(numeric::pairwise_sum(&vals))
}

/// Bismut-type estimator of `d(P_t f)(v₀)`:
/// `(1/t) E[f(x_t) Σ_k ⟨Y(x_k)W_k v₀, //̃_k ΔB̃_k⟩]`, compared with a
/// common-random-numbers central difference in chart coordinates
/// (ε = 1e-4) and, on the circle, with the wrapped-Gaussian series.
pub fn bismut_gradient(sys: &SdeSystem, cfg: &McConfig, f: &Expr) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let eps = 1e-4;
    let is_circle = sys.name == "circle";
    let shifted = |s: f64| Point { chart: cfg.x0.chart.clone(), x: &cfg.x0.x + &cfg.v0 * s };
    let (xp, xm) = (shifted(eps), shifted(-eps));
    let weight = |path: &FlowPath, noise: &NoiseGrid| -> EResult<f64> {
        let w = filtered_flow(path)?;
        let dec = noise_decompose(path, noise)?;
        let mut terms = Vec::with_capacity(path.last());
        for k in 0..path.last() {
            let lg = &path.geometry[k];
            let yw = &lg.y * (&w[k] * &cfg.v0);
            let db_tilde = &dec.b_tilde[k + 1] - &dec.b_tilde[k];
            terms.push(yw.dot(&(&path.noise_transport[k] * db_tilde)));
        }
        let end = path.last();
        Ok(eval_scalar(sys, f, &path.points[end])? * numeric::pairwise_sum(&terms) / (end as f64 * noise.dt))
    };
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some(path) = full_path(sys, cfg, &noise, adjoint_metric) else { return Ok(None) };
        let est = weight(&path, &noise)?;
        let plus = integrate(sys, &xp, &noise, PathOptions::default(), adjoint_metric);
        let minus = integrate(sys, &xm, &noise, PathOptions::default(), adjoint_metric);
        if !plus.alive() || !minus.alive() {
            return Ok(None);
        }
        let fd = (eval_scalar(sys, f, &plus.points[plus.last()])? - eval_scalar(sys, f, &minus.points[minus.last()])?)
            / (2.0 * eps);
        let coarse = if is_circle && steps % 2 == 0 {
            let cn = noise.coarsen();
            match full_path(sys, cfg, &cn, adjoint_metric) {
                Some(p) => weight(&p, &cn)?,
                None => return Ok(None),
            }
        } else {
            f64::NAN
        };
        Ok(Some(vec![est, fd, coarse]))
    })?;
    let mut report = McReport::new("bismut", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let est = column(&rows, 0);
    let fd = column(&rows, 1);
    let (m_est, se_est) = numeric::mean_and_se(&est);
    let (_, se_pair) = numeric::mean_and_se(&diff(&est, &fd));
    report.checks.push(Check::new(
        "bismut estimator vs common-noise finite difference",
        m_est,
        se_pair,
        mean(&fd),
        Provenance::DerivedOracle,
        Relation::Equal,
        cfg.k_se,
        0.0,
    ));
    if is_circle {
        let theta0 = cfg.x0.x[0];
        let series = circle_series_gradient(f, theta0, cfg.t)? * cfg.v0[0];
        let coarse = column(&rows, 2);
        let allowance = if coarse.iter().all(|c| c.is_finite()) { (m_est - mean(&coarse)).abs() } else { 0.0 };
        report.checks.push(Check::new(
            "bismut estimator vs wrapped-gaussian series",
            m_est,
            se_est,
            series,
            Provenance::DerivedOracle,
            Relation::Equal,
            cfg.k_se,
            allowance,
        ));
        report.notes.push(format!("dt-halving bias allowance {allowance:e}"));
    }
    report.notes.push(format!("finite-difference step {eps:e}; standard error of the paired difference"));
    Ok(report.finish(started))
}

/// Moment sandwich
/// `E exp(½∫h̲_p) ≤ E|Tξ_t|^p ≤ n E exp(½∫h_p)`
/// with `|Tξ_t|` the operator norm in g-orthonormal frames. The fixed-`v₀`
/// variant `E exp(½∫h̲_p) ≤ E(|Tξ_t v₀|/|v₀|)^p ≤ E exp(½∫h_p)` is
/// reported alongside.
pub fn moment_sandwich(sys: &SdeSystem, cfg: &McConfig, p: f64) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    if !(p >= 1.0) {
        return Err(EstimatorError::Config(format!("moment order must be at least 1, got {p}")));
    }
    if !adjoint_is_metric(sys, cfg)? {
        return Ok(McReport::not_applicable(
            "moments",
            sys,
            "adjoint connection is not metric for the induced metric".into(),
        )
        .finish(started));
    }
    let n = sys.n as f64;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let path = integrate(sys, &cfg.x0, &noise, PathOptions { jacobian: true, transports: false }, true);
        if !path.alive() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(AUX_STREAM + 1 + i);
        let mut lo = Vec::with_capacity(steps + 1);
        let mut hi = Vec::with_capacity(steps + 1);
        for lg in &path.geometry {
            let (a, b) = HpForm::new(lg).extremes(p, &mut rng)?;
            lo.push(a);
            hi.push(b);
        }
        let trap = |h: &[f64]| -> f64 {
            let inner: Vec<f64> = h.windows(2).map(|w| 0.5 * (w[0] + w[1]) * cfg.dt).collect();
            numeric::pairwise_sum(&inner)
        };
        let end = path.last();
        let lg0 = &path.geometry[0];
        let lge = &path.geometry[end];
        let j = &path.jacobians[end];
        let frame = &lge.root * j * numeric::inverse(&lg0.root).map_err(GeometryError::from)?;
        let op = numeric::operator_norm(&frame).powf(p);
        let fixed = (lge.norm(&(j * &cfg.v0)) / lg0.norm(&cfg.v0)).powf(p);
        let lower = (0.5 * trap(&lo)).exp();
        let upper = (0.5 * trap(&hi)).exp();
        Ok(Some(vec![op, fixed, lower, upper]))
    })?;
    let mut report = McReport::new("moments", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let (op, fixed, lower, upper) = (column(&rows, 0), column(&rows, 1), column(&rows, 2), column(&rows, 3));
    let upper_n: Vec<f64> = upper.iter().map(|u| u * n).collect();
    let paired = |a: &[f64], b: &[f64]| numeric::mean_and_se(&diff(a, b)).1;
    let k = cfg.k_se;
    let s = Provenance::Statistical;
    report.checks.push(Check::new("operator norm: lower bound", mean(&op), paired(&op, &lower), mean(&lower), s, Relation::AtLeast, k, 0.0));
    report.checks.push(Check::new("operator norm: upper bound (factor n)", mean(&op), paired(&op, &upper_n), mean(&upper_n), s, Relation::AtMost, k, 0.0));
    report.checks.push(Check::new("fixed v0: lower bound", mean(&fixed), paired(&fixed, &lower), mean(&lower), s, Relation::AtLeast, k, 0.0));
    report.checks.push(Check::new("fixed v0: upper bound", mean(&fixed), paired(&fixed, &upper), mean(&upper), s, Relation::AtMost, k, 0.0));
    report.notes.push(format!("p = {p}; operator norm is the largest singular value of J in g-orthonormal frames"));
    Ok(report.finish(started))
}

/// Small-time generator check: `(E f(x_t) − f(x₀))/t` against
/// `½ trace ∇̆ grad f + ⟨A, grad f⟩`, which is also compared with the
/// Levi-Civita form. The bias allowance is `2|est(t) − est(t/2)|`, both
/// read off the same paths.
pub fn generator_check(sys: &SdeSystem, cfg: &McConfig, f: &Expr) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    let fg = |y: &Vector| -> geometry::GResult<f64> { f.eval(y.as_slice()).map_err(|e| ModelError::Eval(e).into()) };
    let chart = cfg.x0.chart.clone();
    let lw = geometry::generator_lw(sys, &cfg.x0, chart_scalar(sys, &chart, fg))?;
    let lc = geometry::generator_levi_civita(sys, &cfg.x0, chart_scalar(sys, &chart, fg))?;
    let f0 = eval_scalar(sys, f, &cfg.x0)?;
    let half = steps / 2;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let path = integrate(sys, &cfg.x0, &noise, PathOptions::default(), true);
        if !path.alive() {
            return Ok(None);
        }
        let at = |k: usize| -> EResult<f64> { Ok((eval_scalar(sys, f, &path.points[k])? - f0) / (k as f64 * cfg.dt)) };
        Ok(Some(vec![at(steps)?, if half > 0 { at(half)? } else { f64::NAN }]))
    })?;
    let mut report = McReport::new("generator", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let (m, se) = numeric::mean_and_se(&column(&rows, 0));
    let m_half = mean(&column(&rows, 1));
    let allowance = if m_half.is_finite() { 2.0 * (m - m_half).abs() } else { 0.0 };
    report.checks.push(Check::exact("LW form vs Levi-Civita form", lw, lc, Relation::Equal, 1e-6, Provenance::Analytic));
    report.checks.push(Check::new(
        "monte carlo (E f(x_t) - f(x0))/t vs generator",
        m,
        se,
        lw,
        Provenance::Statistical,
        Relation::Equal,
        cfg.k_se,
        allowance,
    ));
    report.notes.push(format!("t-halving bias allowance {allowance:e}"));
    Ok(report.finish(started))
}

/// Small-time 1-form semigroup check: `(E φ(Tξ_t v₀) − φ(v₀))/t` against
/// the Weitzenböck right-hand side, which is also compared with the
/// codifferential form `−½(δ̄d + dδ̄)φ + L_Aφ` and with `½ΣL²_{Xⁱ}φ + L_Aφ`.
/// When `φ = df` and `potential` is `f`, the Weitzenböck side is also
/// compared with `d(𝒜⁰f)(v₀)`.
pub fn one_form_semigroup_check(sys: &SdeSystem, cfg: &McConfig, phi: &[Expr], potential: Option<&Expr>) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    check_form_dim(sys, phi)?;
    let chart = cfg.x0.chart.clone();
    let omega = |y: &Vector| -> geometry::GResult<Vector> {
        let vals = phi.iter().map(|e| e.eval(y.as_slice())).collect::<Result<Vec<_>, _>>().map_err(ModelError::Eval)?;
        Ok(Vector::from_vec(vals))
    };
    let pulled = chart_one_form(sys, &chart, omega);
    let weitz = geometry::weitzenbock_rhs_1form(sys, &cfg.x0, &pulled)?.dot(&cfg.v0);
    let codiff = geometry::generator_1form_via_codifferential(sys, &cfg.x0, &pulled)?.dot(&cfg.v0);
    let lie = geometry::generator_1form_via_lie(sys, &cfg.x0, &pulled)?.dot(&cfg.v0);
    let phi0 = eval_form(sys, phi, &cfg.x0, &cfg.v0)?;
    let half = steps / 2;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let path = integrate(sys, &cfg.x0, &noise, PathOptions { jacobian: true, transports: false }, true);
        if !path.alive() {
            return Ok(None);
        }
        let at = |k: usize| -> EResult<f64> {
            let w = &path.jacobians[k] * &cfg.v0;
            Ok((eval_form(sys, phi, &path.points[k], &w)? - phi0) / (k as f64 * cfg.dt))
        };
        Ok(Some(vec![at(steps)?, if half > 0 { at(half)? } else { f64::NAN }]))
    })?;
    let mut report = McReport::new("oneform", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let (m, se) = numeric::mean_and_se(&column(&rows, 0));
    let m_half = mean(&column(&rows, 1));
    let allowance = if m_half.is_finite() { 2.0 * (m - m_half).abs() } else { 0.0 };
    let a = Provenance::Analytic;
    report.checks.push(Check::exact("weitzenbock vs codifferential form", weitz, codiff, Relation::Equal, 1e-4, a));
    report.checks.push(Check::exact("weitzenbock vs lie-derivative form", weitz, lie, Relation::Equal, 1e-4, a));
    if let Some(f) = potential {
        let d_gen = exact_form_generator(sys, &cfg.x0, f, &cfg.v0)?;
        report.checks.push(Check::exact("weitzenbock vs d(generator f) on exact forms", weitz, d_gen, Relation::Equal, EXACT_FORM_TOL, a));
    }
    report.checks.push(Check::new(
        "monte carlo (E φ(Tξ_t v0) - φ(v0))/t vs weitzenbock",
        m,
        se,
        weitz,
        Provenance::Statistical,
        Relation::Equal,
        cfg.k_se,
        allowance,
    ));
    report.notes.push(format!("t-halving bias allowance {allowance:e}"));
    Ok(report.finish(started))
}

/// Three nested finite differences; the outer one uses a wider step.
pub const EXACT_FORM_TOL: f64 = 1e-3;

/// `d(𝒜⁰f)(v)` at `x₀`, differentiating the LW generator form.
pub fn exact_form_generator(sys: &SdeSystem, x0: &Point, f: &Expr, v: &Vector) -> EResult<f64> {
    let chart = x0.chart.clone();
    let fg = |y: &Vector| -> geometry::GResult<f64> { f.eval(y.as_slice()).map_err(|e| ModelError::Eval(e).into()) };
    let gen = |x: &Vector| -> geometry::GResult<Vector> {
        let p = Point { chart: chart.clone(), x: x.clone() };
        Ok(Vector::from_element(1, geometry::generator_lw(sys, &p, chart_scalar(sys, &chart, fg))?))
    };
    let outer = numeric::DerivOracle { h0: 1e-3, richardson_levels: 2 };
    Ok(outer.directional_derivative(gen, &x0.x, v)?[0])
}

/// Smallest eigenvalue of the g-symmetric part of `Ric̆^# − 2∇̆A`.
pub fn bochner_gap(lg: &LocalGeometry) -> EResult<f64> {
    let op = lg.ricci_sharp() - lg.nabla_a() * 2.0;
    let linv = numeric::inverse(&lg.root).map_err(GeometryError::from)?;
    let m = &lg.root * op * linv;
    Ok(numeric::sym_eigenvalues(&((&m + m.transpose()) * 0.5))[0])
}

/// Exponential decay of the filtered flow: per-path least-squares slope
/// of `log|W_t v₀|` over the grid, checked against `−λ/2 + 0.1` where `λ`
/// is the smallest spectral gap over probe points, and optionally against
/// an expected slope within 0.05.
pub fn bochner_decay_check(sys: &SdeSystem, cfg: &McConfig, expected_slope: Option<f64>) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    let mut rng = cfg.aux_rng();
    let mut lambda = bochner_gap(&LocalGeometry::new(sys, &cfg.x0)?)?;
    for _ in 0..20 {
        lambda = lambda.min(bochner_gap(&LocalGeometry::new(sys, &sys.sample_point(&mut rng))?)?);
    }
    if !(lambda > 1e-9) {
        return Ok(McReport::not_applicable(
            "bochner",
            sys,
            format!("hypothesis Ric^# - 2 sym(∇A) > 0 fails: smallest probe eigenvalue {lambda:e}"),
        )
        .finish(started));
    }
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some(path) = full_path(sys, cfg, &noise, adjoint_metric) else { return Ok(None) };
        let w = filtered_flow(&path)?;
        let base = path.geometry[0].norm(&cfg.v0).ln();
        let pts: Vec<(f64, f64)> = (0..=path.last())
            .map(|k| (path.time(k), path.geometry[k].norm(&(&w[k] * &cfg.v0)).ln() - base))
            .collect();
        Ok(Some(vec![ls_slope(&pts)]))
    })?;
    let mut report = McReport::new("bochner", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let (m, se) = numeric::mean_and_se(&column(&rows, 0));
    report.checks.push(Check::new(
        "log|W_t v0| slope <= -λ/2 + 0.1",
        m,
        se,
        -lambda / 2.0 + 0.1,
        Provenance::DerivedOracle,
        Relation::AtMost,
        cfg.k_se,
        0.0,
    ));
    if let Some(expected) = expected_slope {
        report.checks.push(Check::new(
            "log|W_t v0| slope vs expected",
            m,
            se,
            expected,
            Provenance::DerivedOracle,
            Relation::Equal,
            cfg.k_se,
            0.05,
        ));
    }
    report.notes.push(format!("λ = {lambda}"));
    Ok(report.finish(started))
}

fn ls_slope(pts: &[(f64, f64)]) -> f64 {
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt) * (p.0 - mt)).sum();
    sxy / sxx
}

/// Noise decomposition: pathwise reconstruction `B = Σ //̃ ΔB̄`, quadratic
/// variation of `B̄` against `t·I`, and the cross-variation of `B̃` and `β`.
pub fn decomposition_check(sys: &SdeSystem, cfg: &McConfig) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let m = sys.m;
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some(path) = full_path(sys, cfg, &noise, adjoint_metric) else { return Ok(None) };
        let dec = noise_decompose(&path, &noise)?;
        let mut qv = Mat::zeros(m, m);
        let mut cross = Mat::zeros(m, m);
        for k in 0..path.last() {
            let db = &dec.b_bar[k + 1] - &dec.b_bar[k];
            qv += &db * db.transpose();
            let dt_ = &dec.b_tilde[k + 1] - &dec.b_tilde[k];
            let dbeta = &dec.beta[k + 1] - &dec.beta[k];
            cross += dt_ * dbeta.transpose();
        }
        let mut row = vec![dec.reconstruction_error];
        row.extend(qv.iter());
        row.extend(cross.iter());
        Ok(Some(row))
    })?;
    let mut report = McReport::new("decompose", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let recon = column(&rows, 0).into_iter().fold(0.0, f64::max);
    let qv = Mat::from_iterator(m, m, (0..m * m).map(|j| mean(&column(&rows, 1 + j))));
    let frob = (&qv - Mat::identity(m, m) * cfg.t).norm();
    let cross = (0..m * m).map(|j| mean(&column(&rows, 1 + m * m + j)).abs()).fold(0.0, f64::max) / cfg.t;
    let bound = 4.0 / ((rows.len() * steps) as f64).sqrt();
    report.checks.push(Check::exact("max pathwise reconstruction error", recon, 0.0, Relation::AtMost, 1e-10, Provenance::Analytic));
    report.checks.push(Check::exact("|QV(B̄) - t I|_F", frob, 0.0, Relation::AtMost, 0.1, Provenance::Statistical));
    report.checks.push(Check::exact("max |cross-variation(B̃, β)|/t", cross, 0.0, Relation::AtMost, bound, Provenance::Statistical));
    report.notes.push("independence of β beyond second moments is not tested".into());
    Ok(report.finish(started))
}

/// Covariant Itô form of the derivative flow against the Heun Jacobian:
/// mean `|v_t − Tξ_t v₀|_g` relative to mean `|Tξ_t v₀|_g` (5% bound),
/// its change under step halving, and equality of second moments.
pub fn covariant_flow_check(sys: &SdeSystem, cfg: &McConfig) -> EResult<McReport> {
    let started = Instant::now();
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    let adjoint_metric = adjoint_is_metric(sys, cfg)?;
    let gap = |noise: &NoiseGrid| -> EResult<Option<(f64, f64, f64)>> {
        let Some(path) = full_path(sys, cfg, noise, adjoint_metric) else { return Ok(None) };
        let v = covariant_derivative_flow(&path, noise)?;
        let end = path.last();
        let lg = &path.geometry[end];
        let jv = &path.jacobians[end] * &cfg.v0;
        let vv = &v[end] * &cfg.v0;
        Ok(Some((lg.norm(&(&vv - &jv)), lg.norm(&jv), lg.norm(&vv))))
    };
    let (rows, dropped) = fan_out(cfg.n_paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        let Some((d, j, v)) = gap(&noise)? else { return Ok(None) };
        let coarse = if steps % 2 == 0 { gap(&noise.coarsen())?.map(|g| g.0).unwrap_or(f64::NAN) } else { f64::NAN };
        Ok(Some(vec![d, j, v * v, j * j, coarse]))
    })?;
    let mut report = McReport::new("covariant-flow", sys);
    report.paths = rows.len();
    report.dropped_paths = dropped;
    let rel = mean(&column(&rows, 0)) / mean(&column(&rows, 1));
    let (v2, j2) = (column(&rows, 2), column(&rows, 3));
    report.checks.push(Check::exact("mean |v_t - Tξ_t v0| / mean |Tξ_t v0|", rel, 0.0, Relation::AtMost, 0.05, Provenance::DerivedOracle));
    report.checks.push(Check::new(
        "E|v_t|^2 vs E|Tξ_t v0|^2",
        mean(&v2),
        numeric::mean_and_se(&diff(&v2, &j2)).1,
        mean(&j2),
        Provenance::Statistical,
        Relation::Equal,
        cfg.k_se,
        0.0,
    ));
    let coarse = column(&rows, 4);
    if coarse.iter().all(|c| c.is_finite()) {
        let ratio = mean(&column(&rows, 0)) / mean(&coarse);
        report.notes.push(format!("step-halving ratio of mean gaps (dt vs 2dt) = {ratio:.3}"));
    }
    Ok(report.finish(started))
}

/// Discretized Itô formula for `|Tξ_t v|^p`: the pathwise residual
/// `|J_t v|^p − |v|^p − Σ p|J v|^{p−2}⟨J v, ∇̆X(J v)ΔB⟩ − (p/2)Σ|J v|^{p−2}H_p(J v, J v)dt`
/// on a grid and on the same noise at twice the step. Returns the mean
/// absolute residuals `(fine, coarse)` over `paths` paths.
pub fn ito_residuals(sys: &SdeSystem, cfg: &McConfig, p: f64, paths: usize) -> EResult<(f64, f64)> {
    let steps = cfg.steps()?;
    check_v0(sys, &cfg.v0)?;
    let residual = |noise: &NoiseGrid| -> EResult<Option<f64>> {
        let path = integrate(sys, &cfg.x0, noise, PathOptions { jacobian: true, transports: false }, true);
        if !path.alive() {
            return Ok(None);
        }
        let mut mart = Vec::with_capacity(path.last());
        let mut drift = Vec::with_capacity(path.last());
        for k in 0..path.last() {
            let lg = &path.geometry[k];
            let jv = &path.jacobians[k] * &cfg.v0;
            let r = lg.norm(&jv);
            let s = lg.nabla_x(&jv) * noise.increment(k);
            mart.push(p * r.powf(p - 2.0) * lg.inner(&jv, &s));
            drift.push(0.5 * p * r.powf(p - 2.0) * HpForm::new(lg).eval(&jv, p)? * noise.dt);
        }
        let end = path.last();
        let jv = &path.jacobians[end] * &cfg.v0;
        let lhs = path.geometry[end].norm(&jv).powf(p) - path.geometry[0].norm(&cfg.v0).powf(p);
        Ok(Some(lhs - numeric::pairwise_sum(&mart) - numeric::pairwise_sum(&drift)))
    };
    let (rows, _) = fan_out(paths, |i| {
        let noise = cfg.noise(sys, i, steps);
        match (residual(&noise)?, residual(&noise.coarsen())?) {
            (Some(a), Some(b)) => Ok(Some((a.abs(), b.abs()))),
            _ => Ok(None),
        }
    })?;
    let fine: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let coarse: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok((mean(&fine), mean(&coarse)))
}
