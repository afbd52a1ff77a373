//! Pathwise simulation on a single noise grid: the Stratonovich flow, its
//! derivative flow, parallel transports, the noise decomposition, the
//! covariant Itô form of the derivative flow and the filtered flow.
//!
//! Matrices attached to step k map tangent vectors at `x₀` (chart frame of
//! the initial chart) to tangent vectors at `x_k` (chart frame of the chart
//! `x_k` is expressed in). On a chart switch they are left-multiplied by the
//! transition Jacobian.

use crate::geometry::{GeometryError, LocalGeometry, Tensor3};
use crate::model::{Point, SdeSystem};
use crate::numeric::{self, DerivOracle, Mat, Vector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

/// Brownian increments for one path.
///
/// Generator: ChaCha8 seeded with `seed` (via `seed_from_u64`) on stream
/// `path_index`. Each increment is a standard normal (ziggurat transform of
/// the uniform output) times `√dt`, drawn step by step, coordinate by
/// coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseGrid {
    pub dt: f64,
    pub steps: usize,
    pub m: usize,
    pub seed: u64,
    pub path_index: u64,
    increments: Vec<f64>,
}

pub fn sample_noise(seed: u64, path_index: u64, steps: usize, dt: f64, m: usize) -> NoiseGrid {
    assert!(dt > 0.0, "dt must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path_index);
    let sd = dt.sqrt();
    let increments = (0..steps * m)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * sd
        })
        .collect();
    NoiseGrid { dt, steps, m, seed, path_index, increments }
}

impl NoiseGrid {
    pub fn increment(&self, k: usize) -> Vector {
        Vector::from_column_slice(&self.increments[k * self.m..(k + 1) * self.m])
    }

    /// The same Brownian path on a grid of twice the step: increments are
    /// summed in pairs.
    pub fn coarsen(&self) -> NoiseGrid {
        let steps = self.steps / 2;
        let m = self.m;
        let mut increments = vec![0.0; steps * m];
        for k in 0..steps {
            for c in 0..m {
                increments[k * m + c] = self.increments[2 * k * m + c] + self.increments[(2 * k + 1) * m + c];
            }
        }
        NoiseGrid { dt: self.dt * 2.0, steps, m, seed: self.seed, path_index: self.path_index, increments }
    }

    pub fn raw(&self) -> &[f64] {
        &self.increments
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum DeathReason {
    ChartExit,
    NonFinite,
    Geometry(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Death {
    /// Last step index with valid data.
    pub step: usize,
    pub reason: DeathReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PathOptions {
    pub jacobian: bool,
    pub transports: bool,
}

impl PathOptions {
    pub fn all() -> Self {
        PathOptions { jacobian: true, transports: true }
    }
}

/// A simulated path. Vectors are indexed by grid step `0..=steps` and are
/// truncated at death; optional quantities are empty when not requested.
/// `geometry` holds every step only when Jacobians or transports were
/// requested, otherwise just step 0.
#[derive(Debug, Clone)]
pub struct FlowPath {
    pub dt: f64,
    pub points: Vec<Point>,
    pub geometry: Vec<LocalGeometry>,
    pub jacobians: Vec<Mat>,
    /// `//̆_k`, parallel transport of the LW connection.
    pub lw_transport: Vec<Mat>,
    /// `//̂_k`, parallel transport of the adjoint connection.
    pub adjoint_transport: Vec<Mat>,
    /// `//̃_k` on ℝᵐ: `Y(x_k)//̆_k X(x₀)` on the tangent part plus the
    /// normal-bundle transport `N_k`.
    pub noise_transport: Vec<Mat>,
    /// Largest `|σ − 1|` over singular values of a transport step in
    /// orthonormal frames, before re-isometrization.
    pub isometry_defect: f64,
    /// Whether `//̂` was treated as metric (re-isometrized).
    pub adjoint_metric: bool,
    pub death: Option<Death>,
}

impl FlowPath {
    pub fn alive(&self) -> bool {
        self.death.is_none()
    }

    pub fn last(&self) -> usize {
        self.points.len() - 1
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }
}

/// One Newton–Schulz step towards the nearest (partial) isometry: squares
/// the distance of each nonzero singular value from 1.
fn newton_schulz(q: &Mat) -> Mat {
    let c = q.ncols();
    q * (Mat::identity(c, c) * 3.0 - q.transpose() * q) * 0.5
}

/// Re-isometrizes a transport step in g-orthonormal frames. Returns the
/// corrected map and the largest `|σ − 1|` before correction (to first
/// order, half the spectral radius of `QᵀQ − I`).
fn orthonormal_fix(p: &Mat, root_to: &Mat, root0: &Mat, root0_inv: &Mat) -> (Mat, f64) {
    let q = root_to * p * root0_inv;
    let c = q.ncols();
    let gram = q.transpose() * &q - Mat::identity(c, c);
    let defect = 0.5 * numeric::sym_eigenvalues(&gram).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let fixed = newton_schulz(&q) * root0;
    let fixed = root_to.solve_upper_triangular(&fixed).unwrap_or(fixed);
    (fixed, defect)
}

type GResult<T> = Result<T, GeometryError>;

/// Derivative oracle for per-step geometry: plain central differences,
/// accurate to ~1e-10 and a quarter of the cost of the checking oracle.
const STEP_ORACLE: DerivOracle = DerivOracle { h0: 1e-5, richardson_levels: 0 };

fn local(sys: &SdeSystem, p: &Point) -> GResult<LocalGeometry> {
    LocalGeometry::with_oracle(sys, p, &STEP_ORACLE)
}

/// Transport `dv = −Γ(dx, v)` along the chord from `x` to `x + Δx`, by
/// classical RK4 in the chord parameter. `a0`, `am`, `a1` are `Γ(Δx, ·)` at
/// the start, midpoint and end.
fn chord_transport(a0: &Mat, am: &Mat, a1: &Mat, p: &Mat) -> Mat {
    let k1 = -(a0 * p);
    let k2 = -(am * (p + &k1 * 0.5));
    let k3 = -(am * (p + &k2 * 0.5));
    let k4 = -(a1 * (p + &k3));
    p + (k1 + (k2 + k3) * 2.0 + k4) / 6.0
}

/// Simulates one path from `x0` driven by `noise`.
///
/// The flow uses the Heun predictor–corrector (an exact group integrator
/// on SO(3)); the Jacobian is the exact derivative of the discrete map.
/// With `transports`, `//̆` and `//̂` are integrated along the chord `x_k →
/// x_{k+1}` (RK4 in the chord parameter) followed
/// by re-isometrization in g-orthonormal frames (always for `//̆`, for `//̂`
/// when the adjoint connection is metric), and `//̃`'s normal part is
/// carried by `N_{k+1} = polar(K(x_{k+1}) N_k)` (two Newton–Schulz steps,
/// then restricted to the normal space at `x₀`).
pub fn integrate(sys: &SdeSystem, x0: &Point, noise: &NoiseGrid, opts: PathOptions, adjoint_metric: bool) -> FlowPath {
    let n = sys.n;
    let mut path = FlowPath {
        dt: noise.dt,
        points: vec![x0.clone()],
        geometry: Vec::with_capacity(noise.steps + 1),
        jacobians: Vec::new(),
        lw_transport: Vec::new(),
        adjoint_transport: Vec::new(),
        noise_transport: Vec::new(),
        isometry_defect: 0.0,
        adjoint_metric,
        death: None,
    };
    let lg0 = match local(sys, x0) {
        Ok(lg) => lg,
        Err(e) => {
            path.death = Some(Death { step: 0, reason: DeathReason::Geometry(e.to_string()) });
            return path;
        }
    };
    let root0 = lg0.root.clone();
    let root0_inv = numeric::inverse(&root0).expect("metric root is invertible");
    let x0_mat = lg0.x.clone();
    let x0_inv = if sys.is_group() { numeric::inverse(&x0_mat).ok() } else { None };
    path.geometry.push(lg0);
    let ident = Mat::identity(n, n);
    if opts.jacobian {
        path.jacobians.push(ident.clone());
    }
    if opts.transports {
        path.lw_transport.push(ident.clone());
        path.adjoint_transport.push(ident.clone());
        let lg = &path.geometry[0];
        path.noise_transport.push(&lg.y * &lg.x + &lg.k);
    }
    let mut normal = path.geometry[0].k.clone();
    let mut body = Mat::identity(n, n);
    let dt = noise.dt;
    if !opts.jacobian && !opts.transports {
        lean_flow(sys, &mut path, noise);
        return path;
    }

    for k in 0..noise.steps {
        let db = noise.increment(k);
        let step = if sys.is_group() {
            group_step(sys, &path, &db, dt, opts, &mut body, x0_inv.as_ref())
        } else {
            chart_step(sys, &path, &db, dt, opts, (&root0, &root0_inv), &mut normal)
        };
        match step {
            Ok(s) => {
                path.isometry_defect = path.isometry_defect.max(s.defect);
                path.points.push(s.point);
                path.geometry.push(s.geometry);
                if let Some(j) = s.jacobian {
                    path.jacobians.push(j);
                }
                if let Some((lw, adj, tilde)) = s.transports {
                    path.lw_transport.push(lw);
                    path.adjoint_transport.push(adj);
                    path.noise_transport.push(tilde);
                }
            }
            Err(reason) => {
                path.death = Some(Death { step: k, reason });
                break;
            }
        }
    }
    path
}

/// Flow only: coefficients without derivatives, no per-step geometry.
fn lean_flow(sys: &SdeSystem, path: &mut FlowPath, noise: &NoiseGrid) {
    let dt = noise.dt;
    let drift = sys.group_drift();
    let mut coeffs = (path.geometry[0].x.clone(), path.geometry[0].a.clone());
    for k in 0..noise.steps {
        let db = noise.increment(k);
        let here = &path.points[k];
        let next = if sys.is_group() {
            let xi = match &drift {
                Some(a) => &db + a * dt,
                None => db,
            };
            sys.group_step(here, &xi).map(|(p, _)| p).map_err(|e| classify(e.into()))
        } else {
            let f0 = &coeffs.0 * &db + &coeffs.1 * dt;
            let star = &here.x + &f0;
            let eval = |x: &Vector| -> Result<(Mat, Vector), DeathReason> {
                let xm = sys.coeff_x(&here.chart, x).map_err(|e| classify(e.into()))?;
                let a = sys.drift(&here.chart, x).map_err(|e| classify(e.into()))?;
                Ok((xm, a))
            };
            eval(&star).and_then(|(xs, as_)| {
                let x_new = &here.x + (&f0 + xs * &db + as_ * dt) * 0.5;
                if x_new.iter().all(|v| v.is_finite()) {
                    Ok(Point { chart: here.chart.clone(), x: x_new })
                } else {
                    Err(DeathReason::NonFinite)
                }
            })
        };
        let next = next.and_then(|p| match sys.maybe_switch(&p) {
            Ok(Some((q, _))) => Ok(q),
            Ok(None) => Ok(p),
            Err(e) => Err(classify(e.into())),
        });
        let next = next.and_then(|p| {
            if sys.is_group() {
                return Ok((p, None));
            }
            let xm = sys.coeff_x(&p.chart, &p.x).map_err(|e| classify(e.into()))?;
            let a = sys.drift(&p.chart, &p.x).map_err(|e| classify(e.into()))?;
            Ok((p, Some((xm, a))))
        });
        match next {
            Ok((p, c)) => {
                if let Some(c) = c {
                    coeffs = c;
                }
                path.points.push(p);
            }
            Err(reason) => {
                path.death = Some(Death { step: k, reason });
                return;
            }
        }
    }
}

struct StepOut {
    point: Point,
    geometry: LocalGeometry,
    jacobian: Option<Mat>,
    transports: Option<(Mat, Mat, Mat)>,
    defect: f64,
}

fn classify(e: GeometryError) -> DeathReason {
    match e {
        GeometryError::Model(crate::model::ModelError::OutOfDomain | crate::model::ModelError::OutOfOverlap) => {
            DeathReason::ChartExit
        }
        other => DeathReason::Geometry(other.to_string()),
    }
}

fn finite(m: &Mat) -> bool {
    m.iter().all(|v| v.is_finite())
}

fn chart_step(
    sys: &SdeSystem,
    path: &FlowPath,
    db: &Vector,
    dt: f64,
    opts: PathOptions,
    roots: (&Mat, &Mat),
    normal: &mut Mat,
) -> Result<StepOut, DeathReason> {
    let (root0, root0_inv) = roots;
    let k = path.last();
    let here = &path.points[k];
    let lg = &path.geometry[k];
    let f0 = &lg.x * db + &lg.a * dt;
    let star = Point { chart: here.chart.clone(), x: &here.x + &f0 };
    let lg_star = local(sys, &star).map_err(classify)?;
    let f1 = &lg_star.x * db + &lg_star.a * dt;
    let x_new = &here.x + (&f0 + &f1) * 0.5;
    if x_new.iter().any(|v| !v.is_finite()) {
        return Err(DeathReason::NonFinite);
    }
    let new_pt = Point { chart: here.chart.clone(), x: x_new };
    let lg_new = local(sys, &new_pt).map_err(classify)?;

    let jacobian = if opts.jacobian {
        // DF(x)(v) = DX(x)(v)ΔB + DA(x)(v)dt, columnwise over chart directions.
        let df = |g: &LocalGeometry| -> Mat {
            let n = g.n();
            let mut m = Mat::zeros(n, n);
            for j in 0..n {
                m.set_column(j, &(&g.dx[j] * db + g.da.column(j) * dt));
            }
            m
        };
        let d0 = df(lg);
        let d1 = df(&lg_star);
        let j = &path.jacobians[k];
        let d0j = &d0 * j;
        Some(j + (&d0j + &d1 * (j + &d0j)) * 0.5)
    } else {
        None
    };

    let mut defect: f64 = 0.0;
    let transports = if opts.transports {
        let dx = &new_pt.x - &here.x;
        let mid = Point { chart: here.chart.clone(), x: &here.x + &dx * 0.5 };
        let gm = local(sys, &mid).map_err(classify)?.gamma;
        let lw = chord_transport(
            &lg.gamma.along(&dx),
            &gm.along(&dx),
            &lg_new.gamma.along(&dx),
            &path.lw_transport[k],
        );
        let (lw, d1) = orthonormal_fix(&lw, &lg_new.root, root0, root0_inv);
        defect = defect.max(d1);
        let mut adj = chord_transport(
            &lg.gamma.along_second(&dx),
            &gm.along_second(&dx),
            &lg_new.gamma.along_second(&dx),
            &path.adjoint_transport[k],
        );
        if path.adjoint_metric {
            let (fixed, d2) = orthonormal_fix(&adj, &lg_new.root, root0, root0_inv);
            adj = fixed;
            defect = defect.max(d2);
        }
        if normal.amax() > 0.0 {
            // Projection shrinks N by O(dt) per step; two iterations bring
            // that to rounding level.
            *normal = newton_schulz(&newton_schulz(&(&lg_new.k * &*normal))) * &path.geometry[0].k;
        }
        Some((lw, adj))
    } else {
        None
    };

    // Chart switch.
    let (point, geometry, phi) = match sys.maybe_switch(&new_pt).map_err(|e| classify(e.into()))? {
        Some((p, phi)) => {
            let g = local(sys, &p).map_err(classify)?;
            (p, g, Some(phi))
        }
        None => (new_pt, lg_new, None),
    };
    let push = |m: Mat| match &phi {
        Some(phi) => phi * m,
        None => m,
    };
    let jacobian = jacobian.map(push);
    let transports = transports.map(|(lw, adj)| {
        let lw = push(lw);
        let adj = push(adj);
        let x0 = &path.geometry[0].x;
        let tilde = &geometry.y * &lw * x0 + &*normal;
        (lw, adj, tilde)
    });
    if let Some(j) = &jacobian {
        if !finite(j) {
            return Err(DeathReason::NonFinite);
        }
    }
    Ok(StepOut { point, geometry, jacobian, transports, defect })
}

fn group_step(
    sys: &SdeSystem,
    path: &FlowPath,
    db: &Vector,
    dt: f64,
    opts: PathOptions,
    body: &mut Mat,
    x0_inv: Option<&Mat>,
) -> Result<StepOut, DeathReason> {
    let k = path.last();
    let here = &path.points[k];
    let drift = sys.group_drift().unwrap_or_else(|| Vector::zeros(3));
    let xi = db + drift * dt;
    let (new_pt, tangent) = sys.group_step(here, &xi).map_err(|e| classify(e.into()))?;
    let (point, phi) = match sys.maybe_switch(&new_pt).map_err(|e| classify(e.into()))? {
        Some((p, phi)) => (p, Some(phi)),
        None => (new_pt, None),
    };
    let geometry = local(sys, &point).map_err(classify)?;
    let jacobian = if opts.jacobian {
        let j = &tangent * &path.jacobians[k];
        Some(match &phi {
            Some(phi) => phi * j,
            None => j,
        })
    } else {
        None
    };
    let transports = if opts.transports {
        // Left-invariant fields are ∇̆-parallel: //̆ is the identity in the
        // body frame. Body vectors are carried by Ad(exp(−ξ)) under //̂.
        let ad = nalgebra::Rotation3::from_scaled_axis(-nalgebra::Vector3::new(xi[0], xi[1], xi[2])).into_inner();
        let ad = Mat::from_iterator(3, 3, ad.iter().copied());
        *body = ad * &*body;
        let x0_inv = x0_inv.expect("group systems have invertible X");
        let lw = &geometry.x * x0_inv;
        let adj = &geometry.x * &*body * x0_inv;
        let tilde = &geometry.y * &lw * &path.geometry[0].x;
        Some((lw, adj, tilde))
    } else {
        None
    };
    Ok(StepOut { point, geometry, jacobian, transports, defect: 0.0 })
}

/// Cumulative decomposed noises on the grid (index 0 is time 0).
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    /// `B̆_t = Σ //̆_k⁻¹ X(x_k)ΔB_k` in `T_{x₀}M`.
    pub b_breve: Vec<Vector>,
    /// `β_t = Σ //̃_k⁻¹ K(x_k)ΔB_k` in ℝᵐ.
    pub beta: Vec<Vector>,
    /// `B̃_t = Y(x₀)B̆_t`.
    pub b_tilde: Vec<Vector>,
    /// `B̄ = B̃ + β`.
    pub b_bar: Vec<Vector>,
    /// Largest `|B_t − Σ //̃_k ΔB̄_k|` over the grid.
    pub reconstruction_error: f64,
}

pub fn noise_decompose(path: &FlowPath, noise: &NoiseGrid) -> GResult<Decomposition> {
    let n = path.geometry[0].n();
    let m = noise.m;
    let y0 = path.geometry[0].y.clone();
    let mut out = Decomposition {
        b_breve: vec![Vector::zeros(n)],
        beta: vec![Vector::zeros(m)],
        b_tilde: vec![Vector::zeros(m)],
        b_bar: vec![Vector::zeros(m)],
        reconstruction_error: 0.0,
    };
    let mut b = Vector::zeros(m);
    let mut rebuilt = Vector::zeros(m);
    for k in 0..path.last() {
        let db = noise.increment(k);
        let lg = &path.geometry[k];
        let lw_inv = numeric::inverse(&path.lw_transport[k])?;
        let tilde = &path.noise_transport[k];
        let d_breve = lw_inv * (&lg.x * &db);
        let d_beta = numeric::inverse(tilde)? * (&lg.k * &db);
        let d_tilde = &y0 * &d_breve;
        let d_bar = &d_tilde + &d_beta;
        b += &db;
        rebuilt += tilde * &d_bar;
        out.reconstruction_error = out.reconstruction_error.max((&b - &rebuilt).amax());
        out.b_breve.push(out.b_breve[k].clone() + d_breve);
        out.beta.push(out.beta[k].clone() + d_beta);
        out.b_tilde.push(out.b_tilde[k].clone() + d_tilde);
        out.b_bar.push(out.b_bar[k].clone() + d_bar);
    }
    Ok(out)
}

/// `−½Ric̆^# + ∇̆A` at a step.
fn filtered_operator(lg: &LocalGeometry) -> Mat {
    lg.nabla_a() - lg.ricci_sharp() * 0.5
}

/// The covariant Itô equation `D̂v = ∇̆X(v)dB − ½Ric̆^#(v)dt + ∇̆A(v)dt`,
/// integrated by left-point Euler in the `//̂`-frame. Returns the matrices
/// `v₀ ↦ v_k`.
pub fn covariant_derivative_flow(path: &FlowPath, noise: &NoiseGrid) -> GResult<Vec<Mat>> {
    let n = path.geometry[0].n();
    let dt = path.dt;
    let mut u = Mat::identity(n, n);
    let mut out = vec![u.clone()];
    for k in 0..path.last() {
        let lg = &path.geometry[k];
        let adj = &path.adjoint_transport[k];
        let v = adj * &u;
        let db = noise.increment(k);
        let kdb = &lg.k * &db;
        let mut incr = (filtered_operator(lg) * &v) * dt;
        for c in 0..n {
            let col = v.column(c).into_owned();
            let s = lg.dx_along(&col) * &kdb;
            let mut ic = incr.column_mut(c);
            ic += s;
        }
        u += numeric::inverse(adj)? * incr;
        out.push(&path.adjoint_transport[k + 1] * &u);
    }
    Ok(out)
}

/// The filtered flow `D̂W/dt = (−½Ric̆^# + ∇̆A)W` along the path, RK2 in the
/// `//̂`-frame. Returns `W_k` as matrices `v₀ ↦ W_k v₀`.
pub fn filtered_flow(path: &FlowPath) -> GResult<Vec<Mat>> {
    let n = path.geometry[0].n();
    let dt = path.dt;
    let frame_op = |k: usize| -> GResult<Mat> {
        let adj = &path.adjoint_transport[k];
        Ok(numeric::inverse(adj)? * filtered_operator(&path.geometry[k]) * adj)
    };
    let mut w = Mat::identity(n, n);
    let mut out = vec![w.clone()];
    let mut m0 = frame_op(0)?;
    for k in 0..path.last() {
        let m1 = frame_op(k + 1)?;
        let k0 = &m0 * &w;
        let k1 = &m1 * (&w + &k0 * dt);
        w += (k0 + k1) * (0.5 * dt);
        out.push(&path.adjoint_transport[k + 1] * &w);
        m0 = m1;
    }
    Ok(out)
}

/// Parallel transport along a deterministic sequence of points in one
/// chart, for a Christoffel field, by RK4 on each chord.
pub fn transport_along<F>(points: &[Vector], gamma: F) -> GResult<Mat>
where
    F: Fn(&Vector) -> GResult<Tensor3>,
{
    let n = points[0].len();
    let mut p = Mat::identity(n, n);
    let mut g0 = gamma(&points[0])?;
    for w in points.windows(2) {
        let dx = &w[1] - &w[0];
        let gm = gamma(&((&w[0] + &w[1]) * 0.5))?;
        let g1 = gamma(&w[1])?;
        p = chord_transport(&g0.along(&dx), &gm.along(&dx), &g1.along(&dx), &p);
        g0 = g1;
    }
    Ok(p)
}
