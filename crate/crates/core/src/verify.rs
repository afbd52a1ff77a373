//! Deterministic geometry suite and per-point tensor dumps.

use crate::estimators::{Check, Provenance, Relation, Status};
use crate::geometry::{
    self, adjoint_christoffel, chart_scalar, covariant_derivative, curvature, levi_civita_split_check, generator_levi_civita,
    generator_lw, levi_civita_christoffel, lw_christoffel_via_brackets, lw_christoffel_via_inner_products,
    metricity_check, ricci_levi_civita, sectional_curvature, stratonovich_correction, torsion_via_bracket,
    torsion_via_dy, tss_check, z_field, Connection, GResult, HpForm, LocalGeometry, TSS_TOL,
};
use crate::model::{Point, SdeSystem};
use crate::numeric::{self, Mat, Vector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::time::Instant;

/// Tolerances of the suite.
pub mod tol {
    pub const DEFINING: f64 = 1e-6;
    pub const METRICITY: f64 = 1e-6;
    pub const CHRISTOFFEL_ROUTES: f64 = 1e-5;
    pub const TORSION_ROUTES: f64 = 1e-4;
    pub const CURVATURE_ROUTES: f64 = 1e-4;
    pub const GENERATOR_ROUTES: f64 = 1e-6;
    pub const LW_EQUALS_LC: f64 = 1e-5;
    pub const SECTIONAL: f64 = 1e-3;
    pub const STRATONOVICH: f64 = 1e-6;
    pub const CURVATURE_ZERO: f64 = 1e-4;
    pub const GROUP_TORSION: f64 = 1e-6;
    pub const RICCI_GAP: f64 = 1e-6;
    pub const LEVI_CIVITA_FROM_LW: f64 = 1e-5;
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub scenario: String,
    pub status: Status,
    pub lw_equals_lc: bool,
    pub curvature_zero: bool,
    pub tss: bool,
    pub adjoint_metric: bool,
    pub points: usize,
    pub probes: usize,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
    pub wall_time_s: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.status == Status::Pass
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifyOptions {
    /// Sample points for the pointwise identities (besides any given ones).
    pub points: usize,
    /// Random probes for the defining property.
    pub probes: usize,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { points: 5, probes: 100, seed: 0 }
    }
}

fn at_most(name: &str, value: f64, tol: f64, provenance: Provenance) -> Check {
    Check::exact(name, value, 0.0, Relation::AtMost, tol, provenance)
}

fn random_vec<R: Rng>(n: usize, rng: &mut R) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// Smooth test function on observable coordinates.
fn probe_function(y: &Vector) -> GResult<f64> {
    Ok(y.iter().enumerate().map(|(i, v)| (v * (1.0 + 0.3 * i as f64)).sin()).sum::<f64>() + 0.5 * y[0] * y[0])
}

/// Symmetric part of `Ric − Ric̆` in a g-orthonormal frame, eigenvalues ascending.
pub fn ricci_gap_eigenvalues(sys: &SdeSystem, p: &Point) -> GResult<Vec<f64>> {
    let lg = LocalGeometry::new(sys, p)?;
    let ric = ricci_levi_civita(sys, p)?.ric;
    let ric_lw = lg.lower(&lg.ricci_sharp());
    let d = lg.in_orthonormal_frame(&(ric - ric_lw))?;
    Ok(numeric::sym_eigenvalues(&((&d + d.transpose()) * 0.5)))
}

/// Runs every pointwise identity on `extra` points plus `opts.points`
/// sampled ones.
pub fn verify_suite(sys: &SdeSystem, extra: &[Point], opts: VerifyOptions) -> GResult<VerifyReport> {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = sys.n;
    let mut points: Vec<Point> = extra.to_vec();
    for _ in 0..opts.points {
        points.push(sys.sample_point(&mut rng));
    }
    let reference = sys.reference();
    let a = Provenance::Analytic;
    let d = Provenance::DerivedOracle;
    let mut checks = Vec::new();
    let mut notes = Vec::new();

    let mut defining: f64 = 0.0;
    for _ in 0..opts.probes {
        let p = sys.sample_point(&mut rng);
        let lg = LocalGeometry::new(sys, &p)?;
        let (v, w) = (random_vec(n, &mut rng), random_vec(n, &mut rng));
        let z = z_field(sys, &p.chart, &lg.y * &v);
        let r = covariant_derivative(&sys.oracle, &lg.gamma, z, &p.x, &w)?;
        defining = defining.max(r.amax());
    }
    checks.push(at_most("LW defining property: max |∇̆_w(X(·)Y(x)v)|", defining, tol::DEFINING, d));

    let (mut met_norm, mut met_xi, mut adj_met): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let (mut ch_inner, mut ch_bracket, mut t_dy, mut t_br, mut r_routes, mut gen): (f64, f64, f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut lw_lc, mut r_max, mut strat_lw, mut strat_lc, mut tss_res, mut lc_from_lw): (f64, f64, f64, f64, f64, f64) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut sectional = Vec::new();
    let (mut gap_min, mut gap_max) = (f64::INFINITY, 0.0f64);
    for p in &points {
        let lg = LocalGeometry::new(sys, p)?;
        let lw = lg.gamma.clone();
        let m = metricity_check(sys, p, &lw, &mut rng, 10)?;
        met_norm = met_norm.max(m.norm_form);
        met_xi = met_xi.max(m.xi_form);
        adj_met = adj_met.max(metricity_check(sys, p, &adjoint_christoffel(sys, p)?, &mut rng, 10)?.norm_form);

        ch_inner = ch_inner.max(lw.max_abs_diff(&lw_christoffel_via_inner_products(sys, p)?));
        ch_bracket = ch_bracket.max(lw.max_abs_diff(&lw_christoffel_via_brackets(sys, p, &mut rng)?));
        let t = lw.torsion();
        t_dy = t_dy.max(t.max_abs_diff(&torsion_via_dy(sys, p)?));
        t_br = t_br.max(t.max_abs_diff(&torsion_via_bracket(sys, p)?));
        let direct = lg.curvature_tensor();
        let via = curvature(sys, p, Connection::LeJanWatanabe)?;
        r_routes = r_routes.max(direct.max_abs_diff(&via));
        r_max = r_max.max(direct.max_abs()).max(via.max_abs());
        let f = chart_scalar(sys, &p.chart, probe_function);
        gen = gen.max((generator_lw(sys, p, &f)? - generator_levi_civita(sys, p, &f)?).abs());

        lw_lc = lw_lc.max(lw.max_abs_diff(&levi_civita_christoffel(sys, p)?));
        let (s_lw, s_lc) = stratonovich_correction(sys, p)?;
        strat_lw = strat_lw.max(s_lw.amax());
        strat_lc = strat_lc.max(s_lc.amax());
        tss_res = tss_res.max(tss_check(sys, p)?.torsion_residual);
        lc_from_lw = lc_from_lw.max(levi_civita_split_check(sys, p, &mut rng, 10)?.residual);

        if n >= 2 {
            let r_lc = curvature(sys, p, Connection::LeviCivita)?;
            let (u, w) = (random_vec(n, &mut rng), random_vec(n, &mut rng));
            sectional.push(sectional_curvature(&r_lc, &lg.g, &u, &w));
        }
        let eig = ricci_gap_eigenvalues(sys, p)?;
        gap_min = gap_min.min(eig[0]);
        gap_max = gap_max.max(eig.iter().fold(0.0f64, |acc, e| acc.max(e.abs())));
    }
    let lw_equals_lc = lw_lc < tol::LW_EQUALS_LC;
    let curvature_zero = r_max < tol::CURVATURE_ZERO;
    let tss = tss_res < TSS_TOL;
    let adjoint_metric = adj_met < tol::METRICITY;

    checks.push(at_most("LW metricity: d<Z,Z>(v) - 2<∇̆_vZ,Z>", met_norm, tol::METRICITY, d));
    checks.push(at_most("LW metricity: ΣXⁱ<Z,∇̆Xⁱ> + Σ∇̆Xⁱ<Z,Xⁱ>", met_xi, tol::METRICITY, d));
    checks.push(Check::exact(
        "adjoint connection metric iff torsion skew symmetric",
        (adjoint_metric != tss) as u8 as f64,
        0.0,
        Relation::Equal,
        0.0,
        d,
    ));
    notes.push(format!("adjoint metricity residual {adj_met:e}; torsion skew-symmetry residual {tss_res:e}"));
    checks.push(at_most("Christoffel: direct vs inner-product route", ch_inner, tol::CHRISTOFFEL_ROUTES, d));
    checks.push(at_most("Christoffel: direct vs bracket route", ch_bracket, tol::CHRISTOFFEL_ROUTES, d));
    checks.push(at_most("torsion: Γ̆ antisymmetrization vs DY route", t_dy, tol::TORSION_ROUTES, d));
    checks.push(at_most("torsion: Γ̆ antisymmetrization vs -[Z^u,Z^v]", t_br, tol::TORSION_ROUTES, d));
    checks.push(at_most("curvature: ∇̆X product form vs Christoffel derivatives", r_routes, tol::CURVATURE_ROUTES, d));
    checks.push(at_most("generator: LW form vs Levi-Civita form", gen, tol::GENERATOR_ROUTES, d));
    checks.push(at_most("Stratonovich term Σ∇̆Xⁱ(Xⁱ)", strat_lw, tol::STRATONOVICH, a));

    match reference.lw_is_levi_civita {
        Some(true) => checks.push(at_most("|Γ̆ - Γ_LC|∞ (LW is Levi-Civita)", lw_lc, tol::LW_EQUALS_LC, a)),
        Some(false) => checks.push(Check::exact("|Γ̆ - Γ_LC|∞ (LW differs from Levi-Civita)", lw_lc, tol::LW_EQUALS_LC, Relation::AtLeast, 0.0, a)),
        None => {}
    }
    match reference.lw_curvature_zero {
        Some(true) => checks.push(at_most("max |R̆| (curvature zero)", r_max, tol::CURVATURE_ZERO, a)),
        Some(false) => checks.push(Check::exact("max |R̆| (curvature nonzero)", r_max, tol::CURVATURE_ZERO, Relation::AtLeast, 0.0, a)),
        None => {}
    }
    if let Some(expected) = reference.tss {
        checks.push(Check::exact("torsion skew symmetric as expected", (tss != expected) as u8 as f64, 0.0, Relation::Equal, 0.0, a));
    }
    if let (Some(k), false) = (reference.sectional_curvature, sectional.is_empty()) {
        let worst = sectional.iter().copied().fold(k, |acc, s| if (s - k).abs() > (acc - k).abs() { s } else { acc });
        checks.push(Check::exact("sectional curvature (Levi-Civita), worst sample", worst, k, Relation::Equal, tol::SECTIONAL, a));
    }
    if tss {
        checks.push(at_most("Levi-Civita = ∇̆ - ½T̆ on affine fields", lc_from_lw, tol::LEVI_CIVITA_FROM_LW, d));
        checks.push(at_most("Σ∇Xⁱ(Xⁱ) (Levi-Civita)", strat_lc, tol::STRATONOVICH, d));
        checks.push(at_most("adjoint metricity", adj_met, tol::METRICITY, d));
        checks.push(Check::exact("min eigenvalue of Ric - Ric̆", gap_min, 0.0, Relation::AtLeast, tol::RICCI_GAP, d));
        if lw_equals_lc {
            checks.push(at_most("max |eigenvalue| of Ric - Ric̆ (LW is Levi-Civita)", gap_max, tol::RICCI_GAP, d));
        } else {
            checks.push(Check::exact("max |eigenvalue| of Ric - Ric̆ (LW differs)", gap_max, tol::RICCI_GAP, Relation::AtLeast, 0.0, d));
        }
    } else {
        notes.push(format!("not torsion skew symmetric: Ric - Ric̆ eigenvalues in [{gap_min:e}, {gap_max:e}] not checked"));
    }
    if sys.is_group() {
        let id = sys.point_from_coords(&vec![0.0; n])?;
        let t = geometry::lw_christoffel(sys, &id)?.torsion();
        let mut worst: f64 = 0.0;
        let basis = |i: usize| Vector::from_fn(n, |k, _| if k == i { 1.0 } else { 0.0 });
        for i in 0..n {
            for j in 0..n {
                // T̆(eᵢ, eⱼ) = −[eᵢ, eⱼ] = −ε_{ijk}e_k.
                let mut expected = Vector::zeros(n);
                for k in 0..n {
                    expected[k] = -levi_civita_symbol(i, j, k);
                }
                worst = worst.max((t.apply(&basis(i), &basis(j)) - expected).amax());
            }
        }
        checks.push(at_most("group torsion T̆(eᵢ,eⱼ) = -[eᵢ,eⱼ] at the identity", worst, tol::GROUP_TORSION, a));
    }
    let status = if checks.iter().all(|c| c.pass) { Status::Pass } else { Status::Fail };
    Ok(VerifyReport {
        scenario: sys.name.clone(),
        status,
        lw_equals_lc,
        curvature_zero,
        tss,
        adjoint_metric,
        points: points.len(),
        probes: opts.probes,
        checks,
        notes,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn levi_civita_symbol(i: usize, j: usize, k: usize) -> f64 {
    if i == j || j == k || i == k {
        0.0
    } else if (i + 1) % 3 == j && (j + 1) % 3 == k {
        1.0
    } else {
        -1.0
    }
}

/// All tensors at one point. Index conventions:
/// `christoffel[i][j][k] = Γⁱ_{jk}` with `∇_v W = DW(v) + Γ(v, W)`;
/// `torsion[i][j][k] = Tⁱ_{jk}`;
/// `curvature[i][j][k][l] = Rⁱ_{jkl}` with `R(u, v)w = Rⁱ_{jkl} uʲ vᵏ wˡ`;
/// `ricci[j][l] = Ric(e_j, e_l)`; `ricci_sharp[i][j]` maps `e_j` to column j.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TensorPoint {
    pub chart: String,
    pub coords: Vec<f64>,
    pub observable: Vec<f64>,
    pub metric: Vec<Vec<f64>>,
    pub metric_inverse: Vec<Vec<f64>>,
    pub adjoint_y: Vec<Vec<f64>>,
    pub christoffel_lw: Vec<Vec<Vec<f64>>>,
    pub christoffel_adjoint: Vec<Vec<Vec<f64>>>,
    pub christoffel_levi_civita: Vec<Vec<Vec<f64>>>,
    pub torsion_lw: Vec<Vec<Vec<f64>>>,
    pub curvature_lw: Vec<Vec<Vec<Vec<f64>>>>,
    pub ricci_lw: Vec<Vec<f64>>,
    pub ricci_sharp_lw: Vec<Vec<f64>>,
    pub ricci_levi_civita: Vec<Vec<f64>>,
    pub h_p_extremes: [f64; 2],
    pub p: f64,
}

pub const TENSOR_CONVENTIONS: &str = "christoffel[i][j][k] = Γ^i_jk with ∇_v W = DW(v) + Γ(v,W); \
torsion[i][j][k] = T^i_jk; curvature[i][j][k][l] = R^i_jkl with R(u,v)w = R^i_jkl u^j v^k w^l; \
ricci[j][l] = Ric(e_j,e_l); ricci_sharp[i][j]: column j is Ric^#(e_j); all components in chart coordinates";

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn tensors_at(sys: &SdeSystem, p: &Point, power: f64, seed: u64) -> GResult<TensorPoint> {
    let lg = LocalGeometry::new(sys, p)?;
    let sharp = lg.ricci_sharp();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = HpForm::new(&lg).extremes(power, &mut rng)?;
    Ok(TensorPoint {
        chart: p.chart.label().into(),
        coords: p.x.iter().copied().collect(),
        observable: sys.observable(p).iter().copied().collect(),
        metric: rows(&lg.g),
        metric_inverse: rows(&lg.ginv),
        adjoint_y: rows(&lg.y),
        christoffel_lw: lg.gamma.nested(),
        christoffel_adjoint: lg.gamma.transpose_lower().nested(),
        christoffel_levi_civita: levi_civita_christoffel(sys, p)?.nested(),
        torsion_lw: lg.gamma.torsion().nested(),
        curvature_lw: lg.curvature_tensor().nested(),
        ricci_lw: rows(&lg.lower(&sharp)),
        ricci_sharp_lw: rows(&sharp),
        ricci_levi_civita: rows(&ricci_levi_civita(sys, p)?.ric),
        h_p_extremes: [lo, hi],
        p: power,
    })
}
