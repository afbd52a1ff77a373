//! Non-degenerate SDEs `dx = X(x)∘dB + A(x)dt` over a chart atlas, and the
//! built-in scenario registry.

use crate::expr::{Expr, ExprError};
use crate::numeric::{DerivOracle, Mat, Vector};
use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error("bad scenario parameters: {0}")]
    BadParams(String),
    #[error("X is degenerate: smallest singular value {sigma_min:e} at {at:?}")]
    DegenerateX { sigma_min: f64, at: Vec<f64> },
    #[error("point is outside the chart overlap")]
    OutOfOverlap,
    #[error("point left the chart domain")]
    OutOfDomain,
    #[error("coefficient evaluation failed: {0}")]
    Eval(#[from] ExprError),
}

/// Which of the two stereographic charts of a sphere. `North` projects from
/// the north pole, so its origin is the south pole.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pole {
    North,
    South,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Chart {
    Global,
    Stereo(Pole),
    /// Exponential chart `x ↦ c·exp(x)` of SO(3) centered at the unit quaternion `c`.
    Group(UnitQuaternion<f64>),
}

impl Chart {
    pub fn label(&self) -> &'static str {
        match self {
            Chart::Global => "global",
            Chart::Stereo(Pole::North) => "north",
            Chart::Stereo(Pole::South) => "south",
            Chart::Group(_) => "group",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub chart: Chart,
    pub x: Vector,
}

impl Point {
    pub fn global(x: Vector) -> Self {
        Point { chart: Chart::Global, x }
    }
}

/// Scenario parameters as they appear in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ScenarioSpec {
    Flat {
        #[serde(default = "default_two")]
        n: usize,
        /// Ornstein–Uhlenbeck drift `A = -rate·x`.
        #[serde(default)]
        ou_rate: f64,
        #[serde(default = "default_guard")]
        guard_radius: f64,
    },
    SphereGradient {
        #[serde(default = "default_two")]
        n: usize,
    },
    So3LeftInvariant {
        /// Constant drift in the Lie algebra (a left-invariant vector field).
        #[serde(default)]
        drift: Option<[f64; 3]>,
    },
    TwistedPlane {
        alpha: f64,
    },
    Circle {},
    Custom {
        n: usize,
        m: usize,
        /// Row-major: `x[i][k]` is the i-th component of `X(x)e_k`.
        x: Vec<Vec<String>>,
        #[serde(default)]
        a: Option<Vec<String>>,
        #[serde(default = "default_guard")]
        guard_radius: f64,
    },
}

fn default_two() -> usize {
    2
}

fn default_guard() -> f64 {
    1e6
}

#[derive(Debug, Clone)]
enum Kind {
    Flat { rate: f64 },
    Sphere,
    So3 { drift: Vector3<f64> },
    Twisted { alpha: f64 },
    Circle,
    Custom { x: Vec<Expr>, a: Vec<Expr> },
}

/// Reference facts known in closed form for a scenario, used by tests and
/// reports. `None` means no closed form is claimed.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Reference {
    pub compact: bool,
    pub lw_is_levi_civita: Option<bool>,
    pub lw_curvature_zero: Option<bool>,
    pub tss: Option<bool>,
    pub sectional_curvature: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SdeSystem {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub oracle: DerivOracle,
    pub guard_radius: f64,
    kind: Kind,
}

pub const SCENARIO_NAMES: [&str; 6] = ["flat", "sphere-gradient", "so3-left-invariant", "twisted-plane", "circle", "custom"];

/// Parses a `{"name": ..., params...}` block, separating unknown names from
/// malformed parameters.
pub fn scenario_from_json(value: &serde_json::Value) -> Result<ScenarioSpec, ModelError> {
    let name = value.get("name").and_then(|n| n.as_str()).ok_or_else(|| ModelError::BadParams("missing scenario name".into()))?;
    if !SCENARIO_NAMES.contains(&name) {
        return Err(ModelError::UnknownScenario(name.to_string()));
    }
    serde_json::from_value(value.clone()).map_err(|e| ModelError::BadParams(e.to_string()))
}

pub fn build_scenario(spec: &ScenarioSpec) -> Result<SdeSystem, ModelError> {
    build_scenario_with(spec, DerivOracle::default())
}

pub fn build_scenario_with(spec: &ScenarioSpec, oracle: DerivOracle) -> Result<SdeSystem, ModelError> {
    let (name, n, m, guard_radius, kind) = match spec {
        ScenarioSpec::Flat { n, ou_rate, guard_radius } => {
            check_dim(*n, "n")?;
            if !ou_rate.is_finite() || !(*guard_radius > 0.0) {
                return Err(ModelError::BadParams("ou_rate must be finite and guard_radius positive".into()));
            }
            ("flat", *n, *n, *guard_radius, Kind::Flat { rate: *ou_rate })
        }
        ScenarioSpec::SphereGradient { n } => {
            check_dim(*n, "n")?;
            ("sphere-gradient", *n, n + 1, f64::INFINITY, Kind::Sphere)
        }
        ScenarioSpec::So3LeftInvariant { drift } => {
            let d = drift.unwrap_or([0.0; 3]);
            if d.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::BadParams("drift must be finite".into()));
            }
            ("so3-left-invariant", 3, 3, f64::INFINITY, Kind::So3 { drift: Vector3::from(d) })
        }
        ScenarioSpec::TwistedPlane { alpha } => {
            if !alpha.is_finite() {
                return Err(ModelError::BadParams("alpha must be finite".into()));
            }
            ("twisted-plane", 2, 2, f64::INFINITY, Kind::Twisted { alpha: *alpha })
        }
        ScenarioSpec::Circle {} => ("circle", 1, 1, f64::INFINITY, Kind::Circle),
        ScenarioSpec::Custom { n, m, x, a, guard_radius } => {
            check_dim(*n, "n")?;
            check_dim(*m, "m")?;
            if m < n {
                return Err(ModelError::BadParams(format!("noise dimension m={m} is smaller than n={n}")));
            }
            if x.len() != *n || x.iter().any(|row| row.len() != *m) {
                return Err(ModelError::BadParams(format!("x must be an {n}x{m} array of expressions")));
            }
            if !(*guard_radius > 0.0) {
                return Err(ModelError::BadParams("guard_radius must be positive".into()));
            }
            let xs = x.iter().flatten().map(|s| Expr::parse(s)).collect::<Result<Vec<_>, _>>()?;
            let a_src: Vec<String> = a.clone().unwrap_or_else(|| vec!["0".into(); *n]);
            if a_src.len() != *n {
                return Err(ModelError::BadParams(format!("a must have {n} components")));
            }
            let a_exprs = a_src.iter().map(|s| Expr::parse(s)).collect::<Result<Vec<_>, _>>()?;
            if let Some(e) = xs.iter().chain(a_exprs.iter()).find(|e| e.max_var() > *n) {
                return Err(ModelError::BadParams(format!("expression `{e}` uses a variable beyond x{n}")));
            }
            ("custom", *n, *m, *guard_radius, Kind::Custom { x: xs, a: a_exprs })
        }
    };
    let sys = SdeSystem { name: name.into(), n, m, oracle, guard_radius, kind };
    for chart in sys.charts() {
        let origin = Vector::zeros(n);
        let x = sys.coeff_x(&chart, &origin)?;
        let sigma_min = smallest_singular_value(&x);
        if !(sigma_min > 1e-8) {
            return Err(ModelError::DegenerateX { sigma_min, at: origin.iter().copied().collect() });
        }
    }
    Ok(sys)
}

fn check_dim(n: usize, what: &str) -> Result<(), ModelError> {
    if (1..=16).contains(&n) {
        Ok(())
    } else {
        Err(ModelError::BadParams(format!("{what} must be between 1 and 16, got {n}")))
    }
}

pub fn smallest_singular_value(x: &Mat) -> f64 {
    x.clone().singular_values().min()
}

impl SdeSystem {
    pub fn reference(&self) -> Reference {
        match &self.kind {
            Kind::Flat { .. } => Reference {
                compact: false,
                lw_is_levi_civita: Some(true),
                lw_curvature_zero: Some(true),
                tss: Some(true),
                sectional_curvature: Some(0.0),
            },
            Kind::Sphere => Reference {
                compact: true,
                lw_is_levi_civita: Some(true),
                lw_curvature_zero: Some(self.n == 1),
                tss: Some(true),
                sectional_curvature: Some(1.0),
            },
            Kind::So3 { .. } => Reference {
                compact: true,
                lw_is_levi_civita: Some(false),
                lw_curvature_zero: Some(true),
                tss: Some(true),
                sectional_curvature: Some(0.25),
            },
            Kind::Twisted { alpha } => Reference {
                compact: false,
                lw_is_levi_civita: Some(*alpha == 0.0),
                lw_curvature_zero: Some(true),
                tss: Some(*alpha == 0.0),
                sectional_curvature: Some(0.0),
            },
            Kind::Circle => Reference {
                compact: true,
                lw_is_levi_civita: Some(true),
                lw_curvature_zero: Some(true),
                tss: Some(true),
                sectional_curvature: None,
            },
            Kind::Custom { .. } => Reference::default(),
        }
    }

    pub fn is_group(&self) -> bool {
        matches!(self.kind, Kind::So3 { .. })
    }

    /// Representative charts, one per chart kind (the group chart at the identity).
    pub fn charts(&self) -> Vec<Chart> {
        match self.kind {
            Kind::Sphere => vec![Chart::Stereo(Pole::North), Chart::Stereo(Pole::South)],
            Kind::So3 { .. } => vec![Chart::Group(UnitQuaternion::identity())],
            _ => vec![Chart::Global],
        }
    }

    pub fn in_domain(&self, chart: &Chart, x: &Vector) -> bool {
        if x.iter().any(|v| !v.is_finite()) {
            return false;
        }
        match (&self.kind, chart) {
            (Kind::Sphere, Chart::Stereo(_)) => x.norm() < 1e4,
            (Kind::So3 { .. }, Chart::Group(_)) => x.norm() < 3.0,
            (Kind::Flat { .. } | Kind::Custom { .. }, Chart::Global) => x.norm() <= self.guard_radius,
            (Kind::Twisted { .. } | Kind::Circle, Chart::Global) => true,
            _ => false,
        }
    }

    fn check_chart(&self, chart: &Chart, x: &Vector) -> Result<(), ModelError> {
        if x.len() != self.n || !self.in_domain(chart, x) {
            return Err(ModelError::OutOfDomain);
        }
        Ok(())
    }

    /// `X(x)` as an n×m matrix in chart coordinates.
    pub fn coeff_x(&self, chart: &Chart, x: &Vector) -> Result<Mat, ModelError> {
        self.check_chart(chart, x)?;
        let n = self.n;
        Ok(match (&self.kind, chart) {
            (Kind::Flat { .. }, _) => Mat::identity(n, n),
            (Kind::Circle, _) => Mat::identity(1, 1),
            (Kind::Twisted { alpha }, _) => {
                let (s, c) = (alpha * x[0]).sin_cos();
                Mat::from_row_slice(2, 2, &[c, -s, s, c])
            }
            (Kind::Sphere, Chart::Stereo(pole)) => {
                let p = stereo_embed(*pole, x);
                let proj = Mat::identity(n + 1, n + 1) - &p * p.transpose();
                stereo_dsigma(*pole, &p) * proj
            }
            (Kind::So3 { .. }, _) => {
                let j = jr_inv(&Vector3::new(x[0], x[1], x[2]));
                Mat::from_iterator(3, 3, j.iter().copied())
            }
            (Kind::Custom { x: xs, .. }, _) => {
                let mut out = Mat::zeros(n, self.m);
                for (idx, e) in xs.iter().enumerate() {
                    out[(idx / self.m, idx % self.m)] = e.eval(x.as_slice())?;
                }
                out
            }
            _ => return Err(ModelError::OutOfDomain),
        })
    }

    /// Drift `A(x)` in chart coordinates.
    pub fn drift(&self, chart: &Chart, x: &Vector) -> Result<Vector, ModelError> {
        self.check_chart(chart, x)?;
        Ok(match &self.kind {
            Kind::Flat { rate } => x * (-rate),
            Kind::So3 { drift } => {
                let j = jr_inv(&Vector3::new(x[0], x[1], x[2]));
                let a = j * drift;
                Vector::from_column_slice(a.as_slice())
            }
            Kind::Custom { a, .. } => {
                let mut out = Vector::zeros(self.n);
                for (i, e) in a.iter().enumerate() {
                    out[i] = e.eval(x.as_slice())?;
                }
                out
            }
            _ => Vector::zeros(self.n),
        })
    }

    /// `X` and `A` packed into one vector (X column-major, then A), the form
    /// handed to the derivative oracle so both are differentiated together.
    pub fn packed(&self, chart: &Chart, x: &Vector) -> Result<Vector, ModelError> {
        let xm = self.coeff_x(chart, x)?;
        let a = self.drift(chart, x)?;
        let mut out = Vector::zeros(self.n * self.m + self.n);
        out.rows_mut(0, self.n * self.m).copy_from_slice(xm.as_slice());
        out.rows_mut(self.n * self.m, self.n).copy_from(&a);
        Ok(out)
    }

    pub fn unpack(&self, packed: &Vector) -> (Mat, Vector) {
        let nm = self.n * self.m;
        (
            Mat::from_column_slice(self.n, self.m, &packed.as_slice()[..nm]),
            Vector::from_column_slice(&packed.as_slice()[nm..]),
        )
    }

    /// `(DX(x)(v), DA(x)(v))` from the derivative oracle.
    pub fn d_coeff(&self, chart: &Chart, x: &Vector, v: &Vector) -> Result<(Mat, Vector), ModelError> {
        let d = self.oracle.directional_derivative(|y| self.packed(chart, y), x, v)?;
        Ok(self.unpack(&d))
    }

    /// `(DX(x)(e_j))_j` and the matrix with columns `DA(x)(e_j)`. Closed
    /// forms for the built-in scenarios; `oracle` differentiates expression
    /// and group coefficients.
    pub fn d_coeff_basis(&self, chart: &Chart, x: &Vector, oracle: &DerivOracle) -> Result<(Vec<Mat>, Mat), ModelError> {
        let n = self.n;
        let m = self.m;
        let zero = || Mat::zeros(n, m);
        match (&self.kind, chart) {
            (Kind::Flat { rate }, _) => {
                self.check_chart(chart, x)?;
                Ok(((0..n).map(|_| zero()).collect(), Mat::identity(n, n) * (-rate)))
            }
            (Kind::Circle, _) => {
                self.check_chart(chart, x)?;
                Ok((vec![zero()], Mat::zeros(1, 1)))
            }
            (Kind::Twisted { alpha }, _) => {
                self.check_chart(chart, x)?;
                let (s, c) = (alpha * x[0]).sin_cos();
                let d1 = Mat::from_row_slice(2, 2, &[-s, -c, c, -s]) * *alpha;
                Ok((vec![d1, zero()], Mat::zeros(2, 2)))
            }
            (Kind::Sphere, Chart::Stereo(pole)) => {
                self.check_chart(chart, x)?;
                let p = stereo_embed(*pole, x);
                let demb = self.observable_jacobian(&Point { chart: chart.clone(), x: x.clone() });
                let ds = stereo_dsigma(*pole, &p);
                let proj = Mat::identity(n + 1, n + 1) - &p * p.transpose();
                let (denom, sign) = match pole {
                    Pole::North => (1.0 - p[n], 1.0),
                    Pole::South => (1.0 + p[n], -1.0),
                };
                let dx = (0..n)
                    .map(|j| {
                        let dp = demb.column(j);
                        let dz = dp[n];
                        let mut dds = Mat::zeros(n, n + 1);
                        for i in 0..n {
                            dds[(i, i)] = sign * dz / (denom * denom);
                            dds[(i, n)] = sign * dp[i] / (denom * denom) + 2.0 * p[i] * dz / (denom * denom * denom);
                        }
                        dds * &proj - &ds * (dp * p.transpose() + &p * dp.transpose())
                    })
                    .collect();
                Ok((dx, Mat::zeros(n, n)))
            }
            _ => {
                let mut dx = Vec::with_capacity(n);
                let mut da = Mat::zeros(n, n);
                for j in 0..n {
                    let e = Vector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
                    let d = oracle.directional_derivative(|y| self.packed(chart, y), x, &e)?;
                    let (dxj, daj) = self.unpack(&d);
                    da.set_column(j, &daj);
                    dx.push(dxj);
                }
                Ok((dx, da))
            }
        }
    }

    /// Coordinates of the same manifold point in another chart.
    pub fn transition(&self, from: &Chart, to: &Chart, x: &Vector) -> Result<Vector, ModelError> {
        self.check_chart(from, x).map_err(|_| ModelError::OutOfOverlap)?;
        let y = match (from, to) {
            (Chart::Global, Chart::Global) => x.clone(),
            (Chart::Stereo(a), Chart::Stereo(b)) if a == b => x.clone(),
            (Chart::Stereo(_), Chart::Stereo(_)) => {
                let r2 = x.norm_squared();
                if r2 < 1e-12 {
                    return Err(ModelError::OutOfOverlap);
                }
                x / r2
            }
            (Chart::Group(c1), Chart::Group(c2)) => {
                let q = c1 * UnitQuaternion::from_scaled_axis(Vector3::new(x[0], x[1], x[2]));
                let y = log_near(&(c2.inverse() * q));
                Vector::from_column_slice(y.as_slice())
            }
            _ => return Err(ModelError::OutOfOverlap),
        };
        if !self.in_domain(to, &y) {
            return Err(ModelError::OutOfOverlap);
        }
        Ok(y)
    }

    /// Jacobian of [`transition`](Self::transition) at `x`, mapping tangent
    /// vectors between chart frames.
    pub fn transition_jacobian(&self, from: &Chart, to: &Chart, x: &Vector) -> Result<Mat, ModelError> {
        let y = self.transition(from, to, x)?;
        Ok(match (from, to) {
            (Chart::Stereo(a), Chart::Stereo(b)) if a != b => {
                let r2 = x.norm_squared();
                (Mat::identity(self.n, self.n) * r2 - x * x.transpose() * 2.0) / (r2 * r2)
            }
            (Chart::Group(_), Chart::Group(_)) => {
                let jx = jr(&Vector3::new(x[0], x[1], x[2]));
                let jy = jr_inv(&Vector3::new(y[0], y[1], y[2]));
                let m = jy * jx;
                Mat::from_iterator(3, 3, m.iter().copied())
            }
            _ => Mat::identity(self.n, self.n),
        })
    }

    /// Applies the chart-switch rule: stereographic coordinates with |u| > 2
    /// move to the other pole; group coordinates with |x| > 0.5 are
    /// re-centered. Returns the new point and the transition Jacobian.
    pub fn maybe_switch(&self, p: &Point) -> Result<Option<(Point, Mat)>, ModelError> {
        let target = match (&self.kind, &p.chart) {
            (Kind::Sphere, Chart::Stereo(pole)) if p.x.norm() > 2.0 => Chart::Stereo(match pole {
                Pole::North => Pole::South,
                Pole::South => Pole::North,
            }),
            (Kind::So3 { .. }, Chart::Group(c)) if p.x.norm() > 0.5 => {
                Chart::Group(c * UnitQuaternion::from_scaled_axis(Vector3::new(p.x[0], p.x[1], p.x[2])))
            }
            _ => return Ok(None),
        };
        let jac = self.transition_jacobian(&p.chart, &target, &p.x)?;
        let x = self.transition(&p.chart, &target, &p.x)?;
        Ok(Some((Point { chart: target, x }, jac)))
    }

    /// Canonical embedding of the point, when the scenario has one: the
    /// unit vector for spheres, `(cos θ, sin θ)` for the circle and the
    /// row-major rotation matrix for SO(3).
    pub fn embed(&self, p: &Point) -> Option<Vector> {
        match (&self.kind, &p.chart) {
            (Kind::Sphere, Chart::Stereo(pole)) => Some(stereo_embed(*pole, &p.x)),
            (Kind::Circle, _) => Some(Vector::from_vec(vec![p.x[0].cos(), p.x[0].sin()])),
            (Kind::So3 { .. }, Chart::Group(c)) => {
                let q = c * UnitQuaternion::from_scaled_axis(Vector3::new(p.x[0], p.x[1], p.x[2]));
                let r = q.to_rotation_matrix();
                let m = r.matrix();
                Some(Vector::from_fn(9, |k, _| m[(k / 3, k % 3)]))
            }
            _ => None,
        }
    }

    /// Coordinates test functions are written in: the embedding when there
    /// is one, chart coordinates otherwise.
    pub fn observable(&self, p: &Point) -> Vector {
        self.embed(p).unwrap_or_else(|| p.x.clone())
    }

    /// Jacobian of [`observable`](Self::observable) with respect to chart
    /// coordinates (observable_dim × n), in closed form.
    pub fn observable_jacobian(&self, p: &Point) -> Mat {
        match (&self.kind, &p.chart) {
            (Kind::Sphere, Chart::Stereo(pole)) => {
                let n = self.n;
                let u = &p.x;
                let r2 = u.norm_squared();
                let s = 1.0 + r2;
                let mut d = Mat::zeros(n + 1, n);
                for i in 0..n {
                    for k in 0..n {
                        d[(i, k)] = if i == k { 2.0 / s } else { 0.0 } - 4.0 * u[i] * u[k] / (s * s);
                    }
                }
                let sign = match pole {
                    Pole::North => 1.0,
                    Pole::South => -1.0,
                };
                for k in 0..n {
                    d[(n, k)] = sign * 4.0 * u[k] / (s * s);
                }
                d
            }
            (Kind::Circle, _) => Mat::from_column_slice(2, 1, &[-p.x[0].sin(), p.x[0].cos()]),
            (Kind::So3 { .. }, Chart::Group(c)) => {
                let x = Vector3::new(p.x[0], p.x[1], p.x[2]);
                let r = (c * UnitQuaternion::from_scaled_axis(x)).to_rotation_matrix().into_inner();
                let j = jr(&x);
                let mut d = Mat::zeros(9, 3);
                for k in 0..3 {
                    let dr = r * hat(&j.column(k).into_owned());
                    for e in 0..9 {
                        d[(e, k)] = dr[(e / 3, e % 3)];
                    }
                }
                d
            }
            _ => Mat::identity(self.n, self.n),
        }
    }

    pub fn observable_dim(&self) -> usize {
        match self.kind {
            Kind::Sphere => self.n + 1,
            Kind::Circle => 2,
            Kind::So3 { .. } => 9,
            _ => self.n,
        }
    }

    /// Builds a point from user-facing coordinates: a unit vector in
    /// ℝⁿ⁺¹ for spheres, a rotation vector for SO(3), chart coordinates
    /// otherwise.
    /// Number of coordinates `point_from_coords` expects.
    pub fn point_len(&self) -> usize {
        match &self.kind {
            Kind::Sphere => self.n + 1,
            _ => self.n,
        }
    }

    pub fn point_from_coords(&self, coords: &[f64]) -> Result<Point, ModelError> {
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BadParams("coordinates must be finite".into()));
        }
        match &self.kind {
            Kind::Sphere => {
                if coords.len() != self.n + 1 {
                    return Err(ModelError::BadParams(format!("sphere points need {} coordinates", self.n + 1)));
                }
                let p = Vector::from_column_slice(coords);
                let r = p.norm();
                if (r - 1.0).abs() > 1e-6 {
                    return Err(ModelError::BadParams(format!("sphere point has norm {r}, expected 1")));
                }
                Ok(sphere_point(&(p / r)))
            }
            Kind::So3 { .. } => {
                if coords.len() != 3 {
                    return Err(ModelError::BadParams("SO(3) points are rotation vectors of length 3".into()));
                }
                let c = UnitQuaternion::from_scaled_axis(Vector3::new(coords[0], coords[1], coords[2]));
                Ok(Point { chart: Chart::Group(c), x: Vector::zeros(3) })
            }
            _ => {
                if coords.len() != self.n {
                    return Err(ModelError::BadParams(format!("points need {} coordinates", self.n)));
                }
                let x = Vector::from_column_slice(coords);
                if !self.in_domain(&Chart::Global, &x) {
                    return Err(ModelError::OutOfDomain);
                }
                Ok(Point::global(x))
            }
        }
    }

    /// Random probe points in well-conditioned chart regions.
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> Point {
        let n = self.n;
        match &self.kind {
            Kind::Sphere => {
                let p = loop {
                    let v = Vector::from_fn(n + 1, |_, _| rng.random_range(-1.0..1.0));
                    let r = v.norm();
                    if r > 0.1 && r <= 1.0 {
                        break v / r;
                    }
                };
                sphere_point(&p)
            }
            Kind::So3 { .. } => {
                let axis = Vector3::from_fn(|_, _| rng.random_range(-1.0..1.0));
                let c = UnitQuaternion::from_scaled_axis(axis * 1.5);
                let x = Vector::from_fn(3, |_, _| rng.random_range(-0.25..0.25));
                Point { chart: Chart::Group(c), x }
            }
            Kind::Twisted { .. } => Point::global(Vector::from_fn(2, |_, _| rng.random_range(-2.0..2.0))),
            Kind::Circle => Point::global(Vector::from_fn(1, |_, _| rng.random_range(-3.0..3.0))),
            Kind::Flat { .. } => Point::global(Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))),
            Kind::Custom { .. } => Point::global(Vector::from_fn(n, |_, _| rng.random_range(-0.5..0.5))),
        }
    }

    /// One step of the group integrator on SO(3): `q ↦ q·exp(ξ)`. Returns
    /// the new point (same chart center) and the chart tangent map
    /// `J_r(x')⁻¹ Ad(exp(−ξ)) J_r(x)`.
    pub fn group_step(&self, p: &Point, xi: &Vector) -> Result<(Point, Mat), ModelError> {
        let Chart::Group(c) = &p.chart else {
            return Err(ModelError::OutOfDomain);
        };
        let x = Vector3::new(p.x[0], p.x[1], p.x[2]);
        let xi = Vector3::new(xi[0], xi[1], xi[2]);
        let q = UnitQuaternion::from_scaled_axis(x) * UnitQuaternion::from_scaled_axis(xi);
        let x_new = log_near(&q);
        let ad = Rotation3::from_scaled_axis(-xi).into_inner();
        let tangent = jr_inv(&x_new) * ad * jr(&x);
        let x_new = Vector::from_column_slice(x_new.as_slice());
        if !self.in_domain(&p.chart, &x_new) {
            return Err(ModelError::OutOfDomain);
        }
        Ok((Point { chart: Chart::Group(*c), x: x_new }, Mat::from_iterator(3, 3, tangent.iter().copied())))
    }

    /// Drift of the group scenario in the Lie algebra.
    pub fn group_drift(&self) -> Option<Vector> {
        match &self.kind {
            Kind::So3 { drift } => Some(Vector::from_column_slice(drift.as_slice())),
            _ => None,
        }
    }
}

fn sphere_point(p: &Vector) -> Point {
    let n = p.len() - 1;
    let z = p[n];
    // Project from the pole farther away, so |u| <= 1.
    let (pole, denom) = if z <= 0.0 { (Pole::North, 1.0 - z) } else { (Pole::South, 1.0 + z) };
    Point { chart: Chart::Stereo(pole), x: p.rows(0, n) / denom }
}

/// Inverse stereographic projection.
pub fn stereo_embed(pole: Pole, u: &Vector) -> Vector {
    let n = u.len();
    let r2 = u.norm_squared();
    let mut p = Vector::zeros(n + 1);
    p.rows_mut(0, n).copy_from(&(u * (2.0 / (1.0 + r2))));
    p[n] = match pole {
        Pole::North => (r2 - 1.0) / (r2 + 1.0),
        Pole::South => (1.0 - r2) / (1.0 + r2),
    };
    p
}

/// Derivative of the stereographic projection `σ(p) = p'/(1 ∓ p_z)` as an
/// n×(n+1) matrix.
fn stereo_dsigma(pole: Pole, p: &Vector) -> Mat {
    let n = p.len() - 1;
    let z = p[n];
    let (denom, sign) = match pole {
        Pole::North => (1.0 - z, 1.0),
        Pole::South => (1.0 + z, -1.0),
    };
    let mut d = Mat::zeros(n, n + 1);
    for i in 0..n {
        d[(i, i)] = 1.0 / denom;
        d[(i, n)] = sign * p[i] / (denom * denom);
    }
    d
}

fn hat(x: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -x[2], x[1], x[2], 0.0, -x[0], -x[1], x[0], 0.0)
}

/// Right Jacobian of the SO(3) exponential: `exp(x + δ) ≈ exp(x)·exp(J_r(x)δ)`.
pub fn jr(x: &Vector3<f64>) -> Matrix3<f64> {
    let t = x.norm();
    let h = hat(x);
    let (a, b) = if t < 1e-4 {
        (0.5 - t * t / 24.0, 1.0 / 6.0 - t * t / 120.0)
    } else {
        ((1.0 - t.cos()) / (t * t), (t - t.sin()) / (t * t * t))
    };
    Matrix3::identity() - h * a + h * h * b
}

/// Inverse right Jacobian; its columns are the left-invariant fields in the
/// exponential chart.
pub fn jr_inv(x: &Vector3<f64>) -> Matrix3<f64> {
    let t = x.norm();
    let h = hat(x);
    let c = if t < 1e-4 {
        1.0 / 12.0 + t * t / 720.0
    } else {
        1.0 / (t * t) - (1.0 + t.cos()) / (2.0 * t * t.sin())
    };
    Matrix3::identity() + h * 0.5 + h * h * c
}

/// Rotation vector of `q`, taking the representative with angle in [0, π].
fn log_near(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn flat_x_is_identity() {
        let sys = build_scenario(&ScenarioSpec::Flat { n: 2, ou_rate: 0.0, guard_radius: 1e6 }).unwrap();
        assert_eq!(sys.coeff_x(&Chart::Global, &v(&[0.3, 0.7])).unwrap(), Mat::identity(2, 2));
    }

    #[test]
    fn sphere_pole_projection() {
        let sys = build_scenario(&ScenarioSpec::SphereGradient { n: 2 }).unwrap();
        let p = sys.point_from_coords(&[0.0, 0.0, 1.0]).unwrap();
        let x = sys.coeff_x(&p.chart, &p.x).unwrap();
        // Push back to the embedding with the inverse projection's derivative.
        let pole = match p.chart {
            Chart::Stereo(pole) => pole,
            _ => unreachable!(),
        };
        let demb = DerivOracle::default()
            .jacobian(|u| Ok::<_, ()>(stereo_embed(pole, u)), &p.x)
            .unwrap();
        let emb = demb * x;
        assert_relative_eq!(emb.column(2).norm(), 0.0, epsilon = 1e-9);
        assert_relative_eq!((emb.column(0) - v(&[1.0, 0.0, 0.0])).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn twisted_plane_is_identity_on_the_axis() {
        let sys = build_scenario(&ScenarioSpec::TwistedPlane { alpha: 1.0 }).unwrap();
        for y in [-3.0, 0.0, 5.0] {
            assert_eq!(sys.coeff_x(&Chart::Global, &v(&[0.0, y])).unwrap(), Mat::identity(2, 2));
        }
    }

    #[test]
    fn stereo_transition_fixes_the_equator() {
        let sys = build_scenario(&ScenarioSpec::SphereGradient { n: 2 }).unwrap();
        let y = sys.transition(&Chart::Stereo(Pole::North), &Chart::Stereo(Pole::South), &v(&[1.0, 0.0])).unwrap();
        assert_relative_eq!((y - v(&[1.0, 0.0])).norm(), 0.0, epsilon = 1e-15);
        let err = sys.transition(&Chart::Stereo(Pole::North), &Chart::Stereo(Pole::South), &v(&[0.0, 0.0]));
        assert_eq!(err, Err(ModelError::OutOfOverlap));
        let flat = build_scenario(&ScenarioSpec::Flat { n: 2, ou_rate: 0.0, guard_radius: 10.0 }).unwrap();
        assert_eq!(flat.transition(&Chart::Global, &Chart::Global, &v(&[0.5, 1.0])).unwrap(), v(&[0.5, 1.0]));
        assert_eq!(flat.transition(&Chart::Global, &Chart::Global, &v(&[50.0, 1.0])), Err(ModelError::OutOfOverlap));
    }

    #[test]
    fn transitions_are_mutually_inverse_and_push_x_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sphere = build_scenario(&ScenarioSpec::SphereGradient { n: 2 }).unwrap();
        let so3 = build_scenario(&ScenarioSpec::So3LeftInvariant { drift: None }).unwrap();
        let oracle = DerivOracle::default();
        for sys in [&sphere, &so3] {
            for _ in 0..50 {
                let p = sys.sample_point(&mut rng);
                let other = match &p.chart {
                    Chart::Stereo(Pole::North) => Chart::Stereo(Pole::South),
                    Chart::Stereo(Pole::South) => Chart::Stereo(Pole::North),
                    Chart::Group(c) => Chart::Group(c * UnitQuaternion::from_scaled_axis(Vector3::new(0.1, -0.2, 0.05))),
                    Chart::Global => unreachable!(),
                };
                // Keep the probe inside the sphere overlap band.
                let x = if sys.is_group() { p.x.clone() } else { &p.x / p.x.norm() * rng.random_range(0.6..1.6) };
                let y = sys.transition(&p.chart, &other, &x).unwrap();
                let back = sys.transition(&other, &p.chart, &y).unwrap();
                assert!((back - &x).norm() < 1e-9);
                let jac = sys.transition_jacobian(&p.chart, &other, &x).unwrap();
                let fd = oracle.jacobian(|z| sys.transition(&p.chart, &other, z), &x).unwrap();
                assert!((&jac - fd).norm() < 1e-7);
                let pushed = jac * sys.coeff_x(&p.chart, &x).unwrap();
                let target = sys.coeff_x(&other, &y).unwrap();
                assert!((pushed - target).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn x_is_non_degenerate_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let specs = [
            ScenarioSpec::Flat { n: 3, ou_rate: 1.0, guard_radius: 1e6 },
            ScenarioSpec::SphereGradient { n: 2 },
            ScenarioSpec::SphereGradient { n: 3 },
            ScenarioSpec::So3LeftInvariant { drift: None },
            ScenarioSpec::TwistedPlane { alpha: 0.5 },
            ScenarioSpec::Circle {},
        ];
        for spec in &specs {
            let sys = build_scenario(spec).unwrap();
            for _ in 0..100 {
                let p = sys.sample_point(&mut rng);
                assert!(smallest_singular_value(&sys.coeff_x(&p.chart, &p.x).unwrap()) > 1e-8);
            }
        }
    }

    #[test]
    fn sphere_xy_is_tangent_projection_in_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sys = build_scenario(&ScenarioSpec::SphereGradient { n: 2 }).unwrap();
        for _ in 0..20 {
            let p = sys.sample_point(&mut rng);
            let pole = match p.chart {
                Chart::Stereo(pole) => pole,
                _ => unreachable!(),
            };
            let emb = sys.embed(&p).unwrap();
            let demb = DerivOracle::default().jacobian(|u| Ok::<_, ()>(stereo_embed(pole, u)), &p.x).unwrap();
            let x = sys.coeff_x(&p.chart, &p.x).unwrap();
            let g = crate::numeric::inverse_spd(&(&x * x.transpose())).unwrap();
            let y = x.transpose() * &g;
            let proj = Mat::identity(3, 3) - &emb * emb.transpose();
            // Y X is the tangent projection, and X Y the identity on T_xM.
            assert!((&y * &x - &proj).norm() < 1e-9);
            assert!((&x * &y - Mat::identity(2, 2)).norm() < 1e-9);
            assert!((&demb * &x - &proj).norm() < 1e-9);
        }
    }

    #[test]
    fn group_step_matches_quaternion_product() {
        let so3 = build_scenario(&ScenarioSpec::So3LeftInvariant { drift: None }).unwrap();
        let p = Point { chart: Chart::Group(UnitQuaternion::identity()), x: v(&[0.1, 0.2, -0.1]) };
        let xi = v(&[0.01, -0.03, 0.02]);
        let (q, tangent) = so3.group_step(&p, &xi).unwrap();
        let fd = DerivOracle::default()
            .jacobian(|x| so3.group_step(&Point { chart: p.chart.clone(), x: x.clone() }, &xi).map(|r| r.0.x), &p.x)
            .unwrap();
        assert!((tangent - fd).norm() < 1e-8);
        let direct = UnitQuaternion::from_scaled_axis(Vector3::new(0.1, 0.2, -0.1))
            * UnitQuaternion::from_scaled_axis(Vector3::new(0.01, -0.03, 0.02));
        assert!((q.x - v(direct.scaled_axis().as_slice())).norm() < 1e-14);
    }

    #[test]
    fn observable_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let oracle = DerivOracle::default();
        for spec in [ScenarioSpec::SphereGradient { n: 2 }, ScenarioSpec::So3LeftInvariant { drift: None }, ScenarioSpec::Circle {}] {
            let sys = build_scenario(&spec).unwrap();
            for _ in 0..10 {
                let p = sys.sample_point(&mut rng);
                let fd = oracle
                    .jacobian(|y| Ok::<_, ()>(sys.observable(&Point { chart: p.chart.clone(), x: y.clone() })), &p.x)
                    .unwrap();
                assert!((sys.observable_jacobian(&p) - fd).norm() < 1e-8);
            }
        }
    }

    #[test]
    fn jr_inverse_pair() {
        for x in [Vector3::new(1e-6, 0.0, 0.0), Vector3::new(0.3, -0.2, 0.9), Vector3::new(0.0, 2.0, 1.0)] {
            assert!((jr(&x) * jr_inv(&x) - Matrix3::identity()).norm() < 1e-12);
        }
    }

    #[test]
    fn build_errors() {
        let bad = ScenarioSpec::Custom {
            n: 2,
            m: 2,
            x: vec![vec!["x1".into(), "0".into()], vec!["0".into(), "1".into()]],
            a: None,
            guard_radius: 1e6,
        };
        assert!(matches!(build_scenario(&bad), Err(ModelError::DegenerateX { .. })));
        let wrong_shape = ScenarioSpec::Custom { n: 2, m: 2, x: vec![vec!["1".into()]], a: None, guard_radius: 1e6 };
        assert!(matches!(build_scenario(&wrong_shape), Err(ModelError::BadParams(_))));
        let out_of_range =
            ScenarioSpec::Custom { n: 1, m: 1, x: vec![vec!["1 + x2".into()]], a: None, guard_radius: 1e6 };
        assert!(matches!(build_scenario(&out_of_range), Err(ModelError::BadParams(_))));
        assert!(matches!(build_scenario(&ScenarioSpec::Flat { n: 0, ou_rate: 0.0, guard_radius: 1.0 }), Err(ModelError::BadParams(_))));
        let unknown = scenario_from_json(&serde_json::json!({"name": "torus"}));
        assert_eq!(unknown, Err(ModelError::UnknownScenario("torus".into())));
        let bad_param = scenario_from_json(&serde_json::json!({"name": "twisted-plane", "beta": 1}));
        assert!(matches!(bad_param, Err(ModelError::BadParams(_))));
    }

    #[test]
    fn closed_form_coefficient_derivatives_match_oracle() {
        let oracle = DerivOracle::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for spec in [
            ScenarioSpec::SphereGradient { n: 2 },
            ScenarioSpec::SphereGradient { n: 3 },
            ScenarioSpec::TwistedPlane { alpha: 0.7 },
            ScenarioSpec::Flat { n: 2, ou_rate: 0.5, guard_radius: 1e6 },
            ScenarioSpec::Circle {},
        ] {
            let sys = build_scenario(&spec).unwrap();
            for _ in 0..5 {
                let p = sys.sample_point(&mut rng);
                let (dx, da) = sys.d_coeff_basis(&p.chart, &p.x, &oracle).unwrap();
                for j in 0..sys.n {
                    let e = Vector::from_fn(sys.n, |i, _| if i == j { 1.0 } else { 0.0 });
                    let (fx, fa) = sys.d_coeff(&p.chart, &p.x, &e).unwrap();
                    assert!((&dx[j] - fx).amax() < 1e-7, "{}", sys.name);
                    assert!((da.column(j) - fa).amax() < 1e-7, "{}", sys.name);
                }
            }
        }
    }
}
