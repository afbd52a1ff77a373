//! Pointwise tensor calculus of the connections induced by an SDE.
//!
//! Index conventions, fixed throughout:
//! - Christoffel symbols: `Γ(v, w)ⁱ = Γⁱ_{jk} vʲ wᵏ`, `j` the direction of
//!   differentiation, so `∇_v Z = DZ(v) + Γ(v, Z)`.
//! - Curvature: `R(u, v)w = ∇_u∇_v W − ∇_v∇_u W − ∇_{[u,v]} W`, stored as
//!   `R(u, v)wⁱ = Rⁱ_{jkl} uʲ vᵏ wˡ`.
//! - Torsion: `T(u, v) = Γ(u, v) − Γ(v, u)`, `Tⁱ_{jk} = Γⁱ_{jk} − Γⁱ_{kj}`.
//! - Ricci operator: `Ric^#(v) = Σᵢ R(v, Xⁱ)Xⁱ`, i.e. `Ric^#ⁱ_j = Rⁱ_{jkl} g^{kl}`,
//!   and `Ric(v, w) = ⟨Ric^# v, w⟩_g`.
//!
//! `Xⁱ = X(x)eᵢ` for the standard basis of ℝᵐ.

use crate::model::{Chart, ModelError, Point, SdeSystem};
use crate::numeric::{self, DerivOracle, Mat, NumericError, Vector};
use rand::Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("X is degenerate: smallest singular value {0:e}")]
    DegenerateX(f64),
    #[error("zero tangent vector")]
    ZeroVector,
}

pub type GResult<T> = Result<T, GeometryError>;

/// Rank-3 array `Tⁱ_{jk}` over an n-dimensional tangent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub n: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(n: usize) -> Self {
        Tensor3 { n, data: vec![0.0; n * n * n] }
    }

    fn from_flat(n: usize, flat: &Vector) -> Self {
        Tensor3 { n, data: flat.iter().copied().collect() }
    }

    fn flat(&self) -> Vector {
        Vector::from_column_slice(&self.data)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[(i * self.n + j) * self.n + k]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        self.data[(i * self.n + j) * self.n + k] = v;
    }

    /// `Γ(v, w)`.
    pub fn apply(&self, v: &Vector, w: &Vector) -> Vector {
        self.along(v) * w
    }

    /// The matrix `w ↦ Γ(v, w)`.
    pub fn along(&self, v: &Vector) -> Mat {
        let n = self.n;
        Mat::from_fn(n, n, |i, k| (0..n).map(|j| self.get(i, j, k) * v[j]).sum())
    }

    /// Swaps the two lower indices: the adjoint connection of `Γ`.
    pub fn transpose_lower(&self) -> Tensor3 {
        let n = self.n;
        let mut out = Tensor3::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.set(i, j, k, self.get(i, k, j));
                }
            }
        }
        out
    }

    pub fn torsion(&self) -> Tensor3 {
        let n = self.n;
        let mut out = Tensor3::zeros(n);
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    out.set(i, j, k, self.get(i, j, k) - self.get(i, k, j));
                }
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }

    pub fn scaled(&self, s: f64) -> Tensor3 {
        Tensor3 { n: self.n, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn nested(&self) -> Vec<Vec<Vec<f64>>> {
        let n = self.n;
        (0..n).map(|i| (0..n).map(|j| (0..n).map(|k| self.get(i, j, k)).collect()).collect()).collect()
    }
}

/// Rank-4 array `Rⁱ_{jkl}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    pub n: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(n: usize) -> Self {
        Tensor4 { n, data: vec![0.0; n * n * n * n] }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[((i * self.n + j) * self.n + k) * self.n + l]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, l: usize, v: f64) {
        let n = self.n;
        self.data[((i * n + j) * n + k) * n + l] = v;
    }

    pub fn apply(&self, u: &Vector, v: &Vector, w: &Vector) -> Vector {
        let n = self.n;
        Vector::from_fn(n, |i, _| {
            let mut s = 0.0;
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        s += self.get(i, j, k, l) * u[j] * v[k] * w[l];
                    }
                }
            }
            s
        })
    }

    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|a| a.abs()).fold(0.0, f64::max)
    }

    /// `Ric^#ⁱ_j = Rⁱ_{jkl} g^{kl}`.
    pub fn ricci_sharp(&self, ginv: &Mat) -> Mat {
        let n = self.n;
        Mat::from_fn(n, n, |i, j| {
            let mut s = 0.0;
            for k in 0..n {
                for l in 0..n {
                    s += self.get(i, j, k, l) * ginv[(k, l)];
                }
            }
            s
        })
    }

    /// Largest `|Rⁱ_{jkl} + Rⁱ_{kjl}|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        let n = self.n;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        worst = worst.max((self.get(i, j, k, l) + self.get(i, k, j, l)).abs());
                    }
                }
            }
        }
        worst
    }

    pub fn nested(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        let n = self.n;
        (0..n)
            .map(|i| (0..n).map(|j| (0..n).map(|k| (0..n).map(|l| self.get(i, j, k, l)).collect()).collect()).collect())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Connection {
    LeJanWatanabe,
    Adjoint,
    LeviCivita,
}

/// Induced metric and the projections attached to `X(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub g: Mat,
    pub ginv: Mat,
    pub y: Mat,
    pub p_t: Mat,
    pub p_n: Mat,
}

fn metric_from_x(x: &Mat) -> GResult<MetricPoint> {
    let ginv = x * x.transpose();
    let g = numeric::inverse_spd(&ginv).map_err(|_| GeometryError::DegenerateX(crate::model::smallest_singular_value(x)))?;
    let y = x.transpose() * &g;
    let p_t = &y * x;
    let p_n = Mat::identity(x.ncols(), x.ncols()) - &p_t;
    Ok(MetricPoint { g, ginv, y, p_t, p_n })
}

/// `g⁻¹ = XXᵀ`, `g`, `Y = Xᵀg`, `P_T = YX`, `P_N = I − P_T` at a point.
pub fn induced_metric(sys: &SdeSystem, p: &Point) -> GResult<MetricPoint> {
    let x = sys.coeff_x(&p.chart, &p.x)?;
    let sigma = crate::model::smallest_singular_value(&x);
    if !(sigma >= 1e-8) {
        return Err(GeometryError::DegenerateX(sigma));
    }
    metric_from_x(&x)
}

fn basis(n: usize, j: usize) -> Vector {
    Vector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 })
}

/// First-order data of the SDE at a point: everything the LW connection,
/// its curvature and the flow equations need.
#[derive(Debug, Clone)]
pub struct LocalGeometry {
    pub point: Point,
    pub x: Mat,
    pub a: Vector,
    /// `DX(x)(e_j)` for chart basis vectors.
    pub dx: Vec<Mat>,
    /// Column j is `DA(x)(e_j)`.
    pub da: Mat,
    pub g: Mat,
    pub ginv: Mat,
    pub y: Mat,
    pub k: Mat,
    /// Upper-triangular `L` with `g = LᵀL`.
    pub root: Mat,
    /// LW Christoffel symbols `Γ̆ⁱ_{jk} = −(DX(e_j)Y)ⁱ_k`.
    pub gamma: Tensor3,
}

impl LocalGeometry {
    pub fn new(sys: &SdeSystem, p: &Point) -> GResult<Self> {
        Self::with_oracle(sys, p, &sys.oracle)
    }

    /// As [`new`](Self::new), differentiating non-closed-form coefficients
    /// with `oracle`.
    pub fn with_oracle(sys: &SdeSystem, p: &Point, oracle: &DerivOracle) -> GResult<Self> {
        let n = sys.n;
        let packed = sys.packed(&p.chart, &p.x)?;
        let (x, a) = sys.unpack(&packed);
        let mp = metric_from_x(&x)?;
        let (dx, da) = sys.d_coeff_basis(&p.chart, &p.x, oracle)?;
        let mut gamma = Tensor3::zeros(n);
        for (j, dxj) in dx.iter().enumerate() {
            let m = -(dxj * &mp.y);
            for i in 0..n {
                for k in 0..n {
                    gamma.set(i, j, k, m[(i, k)]);
                }
            }
        }
        let root = numeric::metric_root(&mp.g)?;
        Ok(LocalGeometry { point: p.clone(), x, a, dx, da, g: mp.g, ginv: mp.ginv, y: mp.y, k: mp.p_n, root, gamma })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn m(&self) -> usize {
        self.x.ncols()
    }

    pub fn inner(&self, u: &Vector, v: &Vector) -> f64 {
        (u.transpose() * &self.g * v)[(0, 0)]
    }

    pub fn norm(&self, u: &Vector) -> f64 {
        self.inner(u, u).max(0.0).sqrt()
    }

    /// `DX(x)(v)`.
    pub fn dx_along(&self, v: &Vector) -> Mat {
        let mut out = Mat::zeros(self.n(), self.m());
        for (j, dxj) in self.dx.iter().enumerate() {
            if v[j] != 0.0 {
                out += dxj * v[j];
            }
        }
        out
    }

    /// `S(v)`: column i is `∇̆_v Xⁱ = DX(v)K eᵢ`.
    pub fn nabla_x(&self, v: &Vector) -> Mat {
        self.dx_along(v) * &self.k
    }

    /// Matrix of `v ↦ ∇̆_v A = DA(v) + Γ̆(v, A)`.
    pub fn nabla_a(&self) -> Mat {
        let n = self.n();
        let mut out = self.da.clone();
        for j in 0..n {
            let col = -(&self.dx[j] * (&self.y * &self.a));
            let mut c = out.column_mut(j);
            c += col;
        }
        out
    }

    /// `R̆(u, v)w` via `Σᵢ ∇̆_uXⁱ⟨∇̆_vXⁱ, w⟩ − ∇̆_vXⁱ⟨∇̆_uXⁱ, w⟩`.
    pub fn curvature(&self, u: &Vector, v: &Vector, w: &Vector) -> Vector {
        let su = self.nabla_x(u);
        let sv = self.nabla_x(v);
        let gw = &self.g * w;
        &su * (sv.transpose() * &gw) - &sv * (su.transpose() * &gw)
    }

    pub fn curvature_tensor(&self) -> Tensor4 {
        let n = self.n();
        let s: Vec<Mat> = (0..n).map(|j| self.nabla_x(&basis(n, j))).collect();
        let mut r = Tensor4::zeros(n);
        for j in 0..n {
            for k in 0..n {
                let m = (&s[j] * s[k].transpose() - &s[k] * s[j].transpose()) * &self.g;
                for i in 0..n {
                    for l in 0..n {
                        r.set(i, j, k, l, m[(i, l)]);
                    }
                }
            }
        }
        r
    }

    /// `Ric̆^#` as an n×n matrix.
    pub fn ricci_sharp(&self) -> Mat {
        let n = self.n();
        let mut out = Mat::zeros(n, n);
        for j in 0..n {
            let v = basis(n, j);
            let sv = self.nabla_x(&v);
            let mut col = Vector::zeros(n);
            for i in 0..self.m() {
                let xi = self.x.column(i).into_owned();
                let sx = self.nabla_x(&xi);
                let gx = &self.g * &xi;
                col += &sv * (sx.transpose() * &gx) - &sx * (sv.transpose() * &gx);
            }
            out.set_column(j, &col);
        }
        out
    }

    /// Lower-index form of a `(1,1)` operator: `M(v, w) = ⟨Op v, w⟩_g`, as a
    /// matrix with `M(v, w) = vᵀ M w`.
    pub fn lower(&self, op: &Mat) -> Mat {
        op.transpose() * &self.g
    }

    /// Expresses a bilinear form in a g-orthonormal frame.
    pub fn in_orthonormal_frame(&self, bilinear: &Mat) -> GResult<Mat> {
        let linv = numeric::inverse(&self.root)?;
        Ok(linv.transpose() * bilinear * &linv)
    }

    /// `Σᵢ ∇̆_{Xⁱ}Xⁱ`, which vanishes identically.
    pub fn lw_stratonovich_term(&self) -> Vector {
        let mut out = Vector::zeros(self.n());
        for i in 0..self.m() {
            let xi = self.x.column(i).into_owned();
            out += self.nabla_x(&xi).column(i);
        }
        out
    }
}

/// Γ̆ at a point (Eq. `Γ̆(v, w) = −DX(v)(Yw)`).
pub fn lw_christoffel(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    Ok(LocalGeometry::new(sys, p)?.gamma)
}

pub fn adjoint_christoffel(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    Ok(lw_christoffel(sys, p)?.transpose_lower())
}

fn metric_flat(sys: &SdeSystem, chart: &Chart, y: &Vector) -> GResult<Vector> {
    let x = sys.coeff_x(chart, y)?;
    let mp = metric_from_x(&x)?;
    Ok(Vector::from_column_slice(mp.g.as_slice()))
}

fn christoffel_from_dg(ginv: &Mat, dg: &[Mat]) -> Tensor3 {
    let n = ginv.nrows();
    let mut lower = Tensor3::zeros(n);
    for l in 0..n {
        for j in 0..n {
            for k in 0..n {
                lower.set(l, j, k, 0.5 * (dg[j][(l, k)] + dg[k][(l, j)] - dg[l][(j, k)]));
            }
        }
    }
    let mut gamma = Tensor3::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let s = (0..n).map(|l| ginv[(i, l)] * lower.get(l, j, k)).sum();
                gamma.set(i, j, k, s);
            }
        }
    }
    gamma
}

/// `Γⁱ_{jk} = ½ g^{il}(∂_j g_{lk} + ∂_k g_{lj} − ∂_l g_{jk})`, with `∂g`
/// from the derivative oracle applied to the metric itself.
pub fn levi_civita_christoffel(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    let n = sys.n;
    let mp = induced_metric(sys, p)?;
    let dg: Vec<Mat> = (0..n)
        .map(|j| {
            let d = sys.oracle.directional_derivative(|y| metric_flat(sys, &p.chart, y), &p.x, &basis(n, j))?;
            Ok(Mat::from_column_slice(n, n, d.as_slice()))
        })
        .collect::<GResult<_>>()?;
    Ok(christoffel_from_dg(&mp.ginv, &dg))
}

/// Levi-Civita symbols with `∂g = −g(DX Xᵀ + X DXᵀ)g` taken from the
/// coefficient derivatives already held by `lg`.
pub fn levi_civita_from_local(lg: &LocalGeometry) -> Tensor3 {
    let dg: Vec<Mat> = lg
        .dx
        .iter()
        .map(|dxj| -(&lg.g * (dxj * lg.x.transpose() + &lg.x * dxj.transpose()) * &lg.g))
        .collect();
    christoffel_from_dg(&lg.ginv, &dg)
}

/// Levi-Civita Ricci tensor with a single finite-difference layer: the
/// Christoffel field is [`levi_civita_from_local`].
pub fn ricci_levi_civita(sys: &SdeSystem, p: &Point) -> GResult<RicciPoint> {
    let r = curvature_from_christoffel(
        &sys.oracle,
        |y| Ok(levi_civita_from_local(&LocalGeometry::new(sys, &Point { chart: p.chart.clone(), x: y.clone() })?)),
        &p.x,
    )?;
    let mp = induced_metric(sys, p)?;
    let sharp = r.ricci_sharp(&mp.ginv);
    Ok(RicciPoint { ric: sharp.transpose() * &mp.g, ric_sharp: sharp })
}

pub fn christoffel(sys: &SdeSystem, p: &Point, conn: Connection) -> GResult<Tensor3> {
    match conn {
        Connection::LeJanWatanabe => lw_christoffel(sys, p),
        Connection::Adjoint => adjoint_christoffel(sys, p),
        Connection::LeviCivita => levi_civita_christoffel(sys, p),
    }
}

/// `∇_v Z = DZ(v) + Γ(v, Z(x))`.
pub fn covariant_derivative<F>(oracle: &DerivOracle, gamma: &Tensor3, z: F, x: &Vector, v: &Vector) -> GResult<Vector>
where
    F: Fn(&Vector) -> GResult<Vector>,
{
    let dz = oracle.directional_derivative(&z, x, v)?;
    Ok(dz + gamma.apply(v, &z(x)?))
}

/// Coordinate Lie bracket `[U, V] = DV(U) − DU(V)` at `x`.
pub fn bracket<U, V>(oracle: &DerivOracle, u: U, v: V, x: &Vector) -> GResult<Vector>
where
    U: Fn(&Vector) -> GResult<Vector>,
    V: Fn(&Vector) -> GResult<Vector>,
{
    let (ux, vx) = (u(x)?, v(x)?);
    Ok(oracle.directional_derivative(&v, x, &ux)? - oracle.directional_derivative(&u, x, &vx)?)
}

/// `Z^v(y) = X(y)Y(x₀)v`, the field with `∇̆Z^v = 0` at `x₀`.
pub fn z_field<'a>(sys: &'a SdeSystem, chart: &'a Chart, y0v: Vector) -> impl Fn(&Vector) -> GResult<Vector> + 'a {
    move |y: &Vector| Ok(sys.coeff_x(chart, y)? * &y0v)
}

fn y_flat(sys: &SdeSystem, chart: &Chart, y: &Vector) -> GResult<Vector> {
    let x = sys.coeff_x(chart, y)?;
    Ok(Vector::from_column_slice(metric_from_x(&x)?.y.as_slice()))
}

/// `DY(x)(e_j)` as m×n matrices.
fn dy(sys: &SdeSystem, p: &Point) -> GResult<Vec<Mat>> {
    let n = sys.n;
    (0..n)
        .map(|j| {
            let d = sys.oracle.directional_derivative(|y| y_flat(sys, &p.chart, y), &p.x, &basis(n, j))?;
            Ok(Mat::from_column_slice(sys.m, n, d.as_slice()))
        })
        .collect()
}

/// Γ̆ from `∇̆Z(v) = d/dt Σ Xⁱ(x₀)⟨Z(σ(t)), Xⁱ(σ(t))⟩`, with `Z` constant in
/// the chart: `Γ̆(v, w) = X(x₀)·D[Y(·)w](v)`.
pub fn lw_christoffel_via_inner_products(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    let n = sys.n;
    let x0 = sys.coeff_x(&p.chart, &p.x)?;
    let dys = dy(sys, p)?;
    let mut gamma = Tensor3::zeros(n);
    for (j, dyj) in dys.iter().enumerate() {
        let m = &x0 * dyj;
        for i in 0..n {
            for k in 0..n {
                gamma.set(i, j, k, m[(i, k)]);
            }
        }
    }
    Ok(gamma)
}

/// Γ̆ from `∇̆Z(v) = Σ [Xⁱ, V]⟨Xⁱ, Z⟩ + [V, Z]` with random affine `V`, `Z`
/// (`V(x₀) = e_j`, `Z(x₀) = e_k`), all brackets by finite differences.
pub fn lw_christoffel_via_brackets<R: Rng>(sys: &SdeSystem, p: &Point, rng: &mut R) -> GResult<Tensor3> {
    let n = sys.n;
    let o = &sys.oracle;
    let x0 = p.x.clone();
    let mp = induced_metric(sys, p)?;
    let mut gamma = Tensor3::zeros(n);
    for j in 0..n {
        for k in 0..n {
            let bv = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let bz = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let (ej, ek) = (basis(n, j), basis(n, k));
            let v_field = |y: &Vector| -> GResult<Vector> { Ok(&ej + &bv * (y - &x0)) };
            let z_field = |y: &Vector| -> GResult<Vector> { Ok(&ek + &bz * (y - &x0)) };
            let coeffs = &mp.y * &ek;
            let mut nabla = bracket(o, v_field, z_field, &x0)?;
            for i in 0..sys.m {
                if coeffs[i] == 0.0 {
                    continue;
                }
                let xi = |y: &Vector| -> GResult<Vector> { Ok(sys.coeff_x(&p.chart, y)?.column(i).into_owned()) };
                nabla += bracket(o, xi, v_field, &x0)? * coeffs[i];
            }
            // ∇̆_v Z = DZ(v) + Γ̆(v, Z(x₀)), and DZ(e_j) is column j of bz.
            let g_col = nabla - bz.column(j);
            for i in 0..n {
                gamma.set(i, j, k, g_col[i]);
            }
        }
    }
    Ok(gamma)
}

/// `T̆(v₁, v₂) = X(x₀)(DY(v₁)v₂ − DY(v₂)v₁)`.
pub fn torsion_via_dy(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    let n = sys.n;
    let x0 = sys.coeff_x(&p.chart, &p.x)?;
    let dys = dy(sys, p)?;
    let mut t = Tensor3::zeros(n);
    for j in 0..n {
        for k in 0..n {
            let v = &x0 * (dys[j].column(k) - dys[k].column(j));
            for i in 0..n {
                t.set(i, j, k, v[i]);
            }
        }
    }
    Ok(t)
}

/// `T̆(v₁, v₂) = −[Z^{v₁}, Z^{v₂}](x₀)`.
pub fn torsion_via_bracket(sys: &SdeSystem, p: &Point) -> GResult<Tensor3> {
    let n = sys.n;
    let mp = induced_metric(sys, p)?;
    let mut t = Tensor3::zeros(n);
    for j in 0..n {
        for k in 0..n {
            let zj = z_field(sys, &p.chart, &mp.y * basis(n, j));
            let zk = z_field(sys, &p.chart, &mp.y * basis(n, k));
            let v = -bracket(&sys.oracle, zj, zk, &p.x)?;
            for i in 0..n {
                t.set(i, j, k, v[i]);
            }
        }
    }
    Ok(t)
}

/// Curvature of a connection given as a Christoffel field in one chart:
/// `Rⁱ_{jkl} = ∂_jΓⁱ_{kl} − ∂_kΓⁱ_{jl} + Γⁱ_{jp}Γᵖ_{kl} − Γⁱ_{kp}Γᵖ_{jl}`.
pub fn curvature_from_christoffel<F>(oracle: &DerivOracle, field: F, x: &Vector) -> GResult<Tensor4>
where
    F: Fn(&Vector) -> GResult<Tensor3>,
{
    let g0 = field(x)?;
    let n = g0.n;
    let dg: Vec<Tensor3> = (0..n)
        .map(|j| {
            let d = oracle.directional_derivative(|y| field(y).map(|t| t.flat()), x, &basis(n, j))?;
            Ok(Tensor3::from_flat(n, &d))
        })
        .collect::<GResult<_>>()?;
    let mut r = Tensor4::zeros(n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for l in 0..n {
                    let mut s = dg[j].get(i, k, l) - dg[k].get(i, j, l);
                    for q in 0..n {
                        s += g0.get(i, j, q) * g0.get(q, k, l) - g0.get(i, k, q) * g0.get(q, j, l);
                    }
                    r.set(i, j, k, l, s);
                }
            }
        }
    }
    Ok(r)
}

pub fn curvature(sys: &SdeSystem, p: &Point, conn: Connection) -> GResult<Tensor4> {
    curvature_from_christoffel(
        &sys.oracle,
        |y| christoffel(sys, &Point { chart: p.chart.clone(), x: y.clone() }, conn),
        &p.x,
    )
}

/// R̆(u, v)w from the product form in ∇̆X, without differentiating Γ̆.
pub fn curvature_lw_direct(sys: &SdeSystem, p: &Point, u: &Vector, v: &Vector, w: &Vector) -> GResult<Vector> {
    Ok(LocalGeometry::new(sys, p)?.curvature(u, v, w))
}

/// `⟨R(u, v)v, u⟩ / (|u|²|v|² − ⟨u, v⟩²)`.
pub fn sectional_curvature(r: &Tensor4, g: &Mat, u: &Vector, v: &Vector) -> f64 {
    let ip = |a: &Vector, b: &Vector| (a.transpose() * g * b)[(0, 0)];
    let num = ip(&r.apply(u, v, v), u);
    num / (ip(u, u) * ip(v, v) - ip(u, v).powi(2))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RicciPoint {
    /// `Ric(v, w) = vᵀ Ric w`.
    pub ric: Mat,
    pub ric_sharp: Mat,
}

pub fn ricci(sys: &SdeSystem, p: &Point, conn: Connection) -> GResult<RicciPoint> {
    let r = curvature(sys, p, conn)?;
    let mp = induced_metric(sys, p)?;
    let sharp = r.ricci_sharp(&mp.ginv);
    Ok(RicciPoint { ric: sharp.transpose() * &mp.g, ric_sharp: sharp })
}

/// Residuals of the metricity criteria for a connection at a point:
/// `|d⟨Z,Z⟩(v) − 2⟨∇_vZ, Z⟩|` over random affine fields, and the norm of
/// `Σ Xⁱ⟨Z, ∇_vXⁱ⟩ + Σ ∇_vXⁱ⟨Z, Xⁱ⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricityResidual {
    pub norm_form: f64,
    pub xi_form: f64,
}

pub fn metricity_check<R: Rng>(sys: &SdeSystem, p: &Point, gamma: &Tensor3, rng: &mut R, probes: usize) -> GResult<MetricityResidual> {
    let n = sys.n;
    let o = &sys.oracle;
    let mp = induced_metric(sys, p)?;
    let x0 = sys.coeff_x(&p.chart, &p.x)?;
    let mut out = MetricityResidual { norm_form: 0.0, xi_form: 0.0 };
    for _ in 0..probes {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let z0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let xc = p.x.clone();
        let z = |y: &Vector| -> GResult<Vector> { Ok(&z0 + &b * (y - &xc)) };
        let sq = |y: &Vector| -> GResult<Vector> {
            let zy = z(y)?;
            let g = Mat::from_column_slice(n, n, metric_flat(sys, &p.chart, y)?.as_slice());
            Ok(Vector::from_element(1, (zy.transpose() * g * &zy)[(0, 0)]))
        };
        let dsq = o.directional_derivative(sq, &p.x, &v)?[0];
        let nz = covariant_derivative(o, gamma, z, &p.x, &v)?;
        let scale = 1.0 + dsq.abs();
        out.norm_form = out.norm_form.max((dsq - 2.0 * (nz.transpose() * &mp.g * &z0)[(0, 0)]).abs() / scale);

        let mut acc = Vector::zeros(n);
        for i in 0..sys.m {
            let xi_field = |y: &Vector| -> GResult<Vector> { Ok(sys.coeff_x(&p.chart, y)?.column(i).into_owned()) };
            let nxi = covariant_derivative(o, gamma, xi_field, &p.x, &v)?;
            let xi = x0.column(i).into_owned();
            acc += &xi * (z0.transpose() * &mp.g * &nxi)[(0, 0)] + &nxi * (z0.transpose() * &mp.g * &xi)[(0, 0)];
        }
        out.xi_form = out.xi_form.max(acc.norm());
    }
    Ok(out)
}

/// Torsion skew symmetry of the LW connection, by the torsion criterion
/// `⟨T̆(u,v),w⟩ + ⟨T̆(w,v),u⟩ = 0` and by the Levi-Civita criterion
/// `∇_v Z^w + ∇_w Z^v = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TssReport {
    pub is_tss: bool,
    pub torsion_residual: f64,
    pub levi_civita_residual: f64,
}

pub const TSS_TOL: f64 = 1e-6;

pub fn tss_check(sys: &SdeSystem, p: &Point) -> GResult<TssReport> {
    let n = sys.n;
    let lg = LocalGeometry::new(sys, p)?;
    let t = lg.gamma.torsion();
    let lc = levi_civita_christoffel(sys, p)?;
    let mut torsion_residual: f64 = 0.0;
    let mut lc_residual: f64 = 0.0;
    for a in 0..n {
        for b in 0..n {
            let (u, v) = (basis(n, a), basis(n, b));
            for c in 0..n {
                let w = basis(n, c);
                let r = lg.inner(&t.apply(&u, &v), &w) + lg.inner(&t.apply(&w, &v), &u);
                torsion_residual = torsion_residual.max(r.abs());
            }
            // ∇_v Z^w = DX(v)Y(x₀)w + Γ_LC(v, w).
            let nvw = lg.dx_along(&u) * (&lg.y * &v) + lc.apply(&u, &v);
            let nwv = lg.dx_along(&v) * (&lg.y * &u) + lc.apply(&v, &u);
            lc_residual = lc_residual.max(lg.norm(&(nvw + nwv)));
        }
    }
    Ok(TssReport { is_tss: torsion_residual < TSS_TOL, torsion_residual, levi_civita_residual: lc_residual })
}

/// Residuals of the Levi-Civita connection written through the LW
/// connection of a torsion skew symmetric system,
/// `∇Z(v) = ∇̆Z(v) − ½T̆(v, Z(x₀))`, over random affine `Z`, and of the
/// summed form `Σᵢ ∇Xⁱ(Xⁱ) = 0`.
///
/// The torsion argument order is the one consistent with
/// `T̆(u, v) = ∇̆_uV − ∇̆_vU − [U, V]`; with the arguments swapped the
/// right-hand side is not symmetric and cannot equal a torsion-free connection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeviCivitaSplitReport {
    pub residual: f64,
    pub summed_residual: f64,
}

pub fn levi_civita_split_check<R: Rng>(sys: &SdeSystem, p: &Point, rng: &mut R, probes: usize) -> GResult<LeviCivitaSplitReport> {
    let n = sys.n;
    let o = &sys.oracle;
    let lw = lw_christoffel(sys, p)?;
    let lc = levi_civita_christoffel(sys, p)?;
    let t = lw.torsion();
    let mut residual: f64 = 0.0;
    for _ in 0..probes {
        let v = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let z0 = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
        let b = Mat::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let xc = p.x.clone();
        let z = |y: &Vector| -> GResult<Vector> { Ok(&z0 + &b * (y - &xc)) };
        let lhs = covariant_derivative(o, &lc, z, &p.x, &v)?;
        let rhs = covariant_derivative(o, &lw, z, &p.x, &v)? - t.apply(&v, &z0) * 0.5;
        residual = residual.max((lhs - rhs).amax());
    }
    let (_, lc_term) = stratonovich_correction(sys, p)?;
    Ok(LeviCivitaSplitReport { residual, summed_residual: lc_term.amax() })
}

/// `(Σᵢ ∇̆Xⁱ(Xⁱ), Σᵢ ∇Xⁱ(Xⁱ))`, the Stratonovich correction terms of the
/// LW and Levi-Civita connections.
pub fn stratonovich_correction(sys: &SdeSystem, p: &Point) -> GResult<(Vector, Vector)> {
    let lg = LocalGeometry::new(sys, p)?;
    let lc = levi_civita_christoffel(sys, p)?;
    let mut lc_term = Vector::zeros(sys.n);
    for i in 0..sys.m {
        let xi = lg.x.column(i).into_owned();
        lc_term += lg.dx_along(&xi).column(i) + lc.apply(&xi, &xi);
    }
    Ok((lg.lw_stratonovich_term(), lc_term))
}

/// Precomputed pieces of `H_p(x)(v, v)`.
#[derive(Debug, Clone)]
pub struct HpForm {
    /// `2⟨∇̆A v, v⟩ − ⟨Ric̆^# v, v⟩ + Σ|∇̆Xⁱv|²` as `vᵀ Q v`.
    pub quadratic: Mat,
    /// `Σ⟨∇̆Xⁱ v, v⟩²` as a sum over i of `(vᵀ Bᵢ v)²`.
    pub squares: Vec<Mat>,
    pub g: Mat,
    pub root: Mat,
}

impl HpForm {
    pub fn new(lg: &LocalGeometry) -> Self {
        let n = lg.n();
        let ric = lg.ricci_sharp();
        let na = lg.nabla_a();
        let s: Vec<Mat> = (0..n).map(|j| lg.nabla_x(&basis(n, j))).collect();
        // Column j of Mᵢ is ∇̆_{e_j}Xⁱ, so Mᵢ v = ∇̆_v Xⁱ.
        let mi: Vec<Mat> = (0..lg.m()).map(|i| Mat::from_fn(n, n, |r, j| s[j][(r, i)])).collect();
        let mut q = lg.lower(&na) * 2.0 - lg.lower(&ric);
        for m in &mi {
            q += m.transpose() * &lg.g * m;
        }
        let q = (&q + q.transpose()) * 0.5;
        let squares = mi.iter().map(|m| lg.lower(m)).collect();
        HpForm { quadratic: q, squares, g: lg.g.clone(), root: lg.root.clone() }
    }

    pub fn eval(&self, v: &Vector, p: f64) -> GResult<f64> {
        let v2 = (v.transpose() * &self.g * v)[(0, 0)];
        if !(v2 > 0.0) {
            return Err(GeometryError::ZeroVector);
        }
        let mut h = (v.transpose() * &self.quadratic * v)[(0, 0)];
        if p != 2.0 {
            let s: f64 = self.squares.iter().map(|b| (v.transpose() * b * v)[(0, 0)].powi(2)).sum();
            h += (p - 2.0) * s / v2;
        }
        Ok(h)
    }

    /// `(h̲_p, h_p)`: inf and sup of `H_p(v, v)` over `|v|_g = 1`.
    pub fn extremes<R: Rng>(&self, p: f64, rng: &mut R) -> GResult<(f64, f64)> {
        let linv = numeric::inverse(&self.root)?;
        if p == 2.0 {
            let q = linv.transpose() * &self.quadratic * &linv;
            let ev = numeric::sym_eigenvalues(&q);
            return Ok((ev[0], ev[ev.len() - 1]));
        }
        let n = self.g.nrows();
        let f = |u: &Vector| -> f64 { self.eval(&(&linv * u), p).unwrap_or(f64::NAN) / u.norm_squared() };
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for _ in 0..32 {
            let start = loop {
                let u = Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                if u.norm() > 1e-3 {
                    break u.normalize();
                }
            };
            lo = lo.min(sphere_search(&f, start.clone(), -1.0));
            hi = hi.max(sphere_search(&f, start, 1.0));
        }
        Ok((lo, hi))
    }
}

/// Projected gradient ascent (`sign = 1`) or descent (`sign = −1`) of a
/// degree-0 homogeneous function on the unit sphere.
fn sphere_search<F: Fn(&Vector) -> f64>(f: &F, mut u: Vector, sign: f64) -> f64 {
    let n = u.len();
    let h = 1e-6;
    let mut val = f(&u);
    let mut step = 0.5;
    for _ in 0..500 {
        let grad = Vector::from_fn(n, |i, _| {
            let e = basis(n, i) * h;
            (f(&(&u + &e)) - f(&(&u - &e))) / (2.0 * h)
        });
        let tangent = &grad - &u * u.dot(&grad);
        if tangent.norm() < 1e-10 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let cand = (&u + &tangent * (sign * step)).normalize();
            let cv = f(&cand);
            if sign * (cv - val) > 0.0 {
                let gain = (cv - val).abs();
                u = cand;
                val = cv;
                step *= 2.0;
                improved = gain > 1e-14;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    val
}

pub fn h_p(sys: &SdeSystem, p: &Point, v: &Vector, power: f64) -> GResult<f64> {
    HpForm::new(&LocalGeometry::new(sys, p)?).eval(v, power)
}

/// A scalar test function written in observable coordinates, seen in a chart.
pub fn chart_scalar<'a, F>(sys: &'a SdeSystem, chart: &'a Chart, f: F) -> impl Fn(&Vector) -> GResult<f64> + 'a
where
    F: Fn(&Vector) -> GResult<f64> + 'a,
{
    move |y: &Vector| f(&sys.observable(&Point { chart: chart.clone(), x: y.clone() }))
}

/// A 1-form written in observable coordinates, pulled back to a chart.
pub fn chart_one_form<'a, F>(sys: &'a SdeSystem, chart: &'a Chart, omega: F) -> impl Fn(&Vector) -> GResult<Vector> + 'a
where
    F: Fn(&Vector) -> GResult<Vector> + 'a,
{
    move |y: &Vector| {
        let p = Point { chart: chart.clone(), x: y.clone() };
        let w = omega(&sys.observable(&p))?;
        Ok(sys.observable_jacobian(&p).transpose() * w)
    }
}

fn scalar_gradient<F>(oracle: &DerivOracle, f: F, x: &Vector) -> GResult<Vector>
where
    F: Fn(&Vector) -> GResult<f64>,
{
    let j = oracle.jacobian(|y| Ok::<_, GeometryError>(Vector::from_element(1, f(y)?)), x)?;
    Ok(j.row(0).transpose())
}

/// `𝒜⁰f = ½ trace ∇̆(grad f) + ⟨A, grad f⟩`.
pub fn generator_lw<F>(sys: &SdeSystem, p: &Point, f: F) -> GResult<f64>
where
    F: Fn(&Vector) -> GResult<f64>,
{
    let o = &sys.oracle;
    let lg = LocalGeometry::new(sys, p)?;
    let grad = |y: &Vector| -> GResult<Vector> {
        let mp = induced_metric(sys, &Point { chart: p.chart.clone(), x: y.clone() })?;
        Ok(mp.ginv * scalar_gradient(o, &f, y)?)
    };
    let dgrad = o.jacobian(grad, &p.x)?;
    let gr = grad(&p.x)?;
    let trace = (dgrad + lg.gamma.along_second(&gr)).trace();
    let df = scalar_gradient(o, &f, &p.x)?;
    Ok(0.5 * trace + lg.a.dot(&df))
}

/// `𝒜⁰f = ½Δf + df(½ Σ∇Xⁱ(Xⁱ) + A)` with the Levi-Civita connection.
pub fn generator_levi_civita<F>(sys: &SdeSystem, p: &Point, f: F) -> GResult<f64>
where
    F: Fn(&Vector) -> GResult<f64>,
{
    let o = &sys.oracle;
    let lc = levi_civita_christoffel(sys, p)?;
    let grad = |y: &Vector| -> GResult<Vector> {
        let mp = induced_metric(sys, &Point { chart: p.chart.clone(), x: y.clone() })?;
        Ok(mp.ginv * scalar_gradient(o, &f, y)?)
    };
    let dgrad = o.jacobian(grad, &p.x)?;
    let laplace = (dgrad + lc.along_second(&grad(&p.x)?)).trace();
    let (_, lc_term) = stratonovich_correction(sys, p)?;
    let a = sys.drift(&p.chart, &p.x)?;
    let df = scalar_gradient(o, &f, &p.x)?;
    Ok(0.5 * laplace + df.dot(&(lc_term * 0.5 + a)))
}

impl Tensor3 {
    /// The matrix `v ↦ Γ(v, w)` for fixed `w`.
    pub fn along_second(&self, w: &Vector) -> Mat {
        let n = self.n;
        Mat::from_fn(n, n, |i, j| (0..n).map(|k| self.get(i, j, k) * w[k]).sum())
    }
}

/// `(L_Z φ)_k = Zʲ ∂_jφ_k + φ_j ∂_k Zʲ` at `x`.
pub fn lie_derivative_form<Z, P>(oracle: &DerivOracle, z: Z, phi: P, x: &Vector) -> GResult<Vector>
where
    Z: Fn(&Vector) -> GResult<Vector>,
    P: Fn(&Vector) -> GResult<Vector>,
{
    let dphi = oracle.jacobian(&phi, x)?; // (k, j) = ∂_j φ_k
    let dz = oracle.jacobian(&z, x)?; // (j, k) = ∂_k Zʲ
    Ok(dphi * z(x)? + dz.transpose() * phi(x)?)
}

/// `(∇̂φ)_{jk} = ∂_jφ_k − Γ̂ⁱ_{jk} φ_i` at `y`, as a matrix indexed (j, k).
fn adjoint_cov_form<P>(sys: &SdeSystem, chart: &Chart, phi: &P, y: &Vector) -> GResult<Mat>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let n = sys.n;
    let gamma = adjoint_christoffel(sys, &Point { chart: chart.clone(), x: y.clone() })?;
    let dphi = sys.oracle.jacobian(phi, y)?;
    let ph = phi(y)?;
    Ok(Mat::from_fn(n, n, |j, k| dphi[(k, j)] - (0..n).map(|i| gamma.get(i, j, k) * ph[i]).sum::<f64>()))
}

/// `(∇̂T)_{ajk} = ∂_aT_{jk} − Γ̂ⁱ_{aj}T_{ik} − Γ̂ⁱ_{ak}T_{ji}` for a 2-tensor
/// field, traced with `g^{aj}`: returns the covector `g^{aj}(∇̂T)_{ajk}`.
fn adjoint_trace_cov_2tensor<T>(sys: &SdeSystem, p: &Point, t: T) -> GResult<Vector>
where
    T: Fn(&Vector) -> GResult<Mat>,
{
    let n = sys.n;
    let lg = LocalGeometry::new(sys, p)?;
    let gamma = lg.gamma.transpose_lower();
    let t0 = t(&p.x)?;
    let dt: Vec<Mat> = (0..n)
        .map(|a| {
            let d = sys.oracle.directional_derivative(|y| t(y).map(|m| Vector::from_column_slice(m.as_slice())), &p.x, &basis(n, a))?;
            Ok(Mat::from_column_slice(n, n, d.as_slice()))
        })
        .collect::<GResult<_>>()?;
    let mut out = Vector::zeros(n);
    for k in 0..n {
        let mut s = 0.0;
        for a in 0..n {
            for j in 0..n {
                let mut c = dt[a][(j, k)];
                for i in 0..n {
                    c -= gamma.get(i, a, j) * t0[(i, k)] + gamma.get(i, a, k) * t0[(j, i)];
                }
                s += lg.ginv[(a, j)] * c;
            }
        }
        out[k] = s;
    }
    Ok(out)
}

/// `δ̄φ = −Σᵢ (∇̂_{Xⁱ}φ)(Xⁱ) = −g^{jk}(∇̂φ)_{jk}`.
pub fn bar_delta<P>(sys: &SdeSystem, p: &Point, phi: P) -> GResult<f64>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let cov = adjoint_cov_form(sys, &p.chart, &phi, &p.x)?;
    let mp = induced_metric(sys, p)?;
    Ok(-mp.ginv.component_mul(&cov).sum())
}

/// `δ̄φ = −Σᵢ (L_{Xⁱ}φ)(Xⁱ)`.
pub fn bar_delta_lie<P>(sys: &SdeSystem, p: &Point, phi: P) -> GResult<f64>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let x0 = sys.coeff_x(&p.chart, &p.x)?;
    let mut s = 0.0;
    for i in 0..sys.m {
        let xi = |y: &Vector| -> GResult<Vector> { Ok(sys.coeff_x(&p.chart, y)?.column(i).into_owned()) };
        s += lie_derivative_form(&sys.oracle, xi, &phi, &p.x)?.dot(&x0.column(i));
    }
    Ok(-s)
}

/// Weitzenböck right-hand side for 1-forms,
/// `𝒜¹φ(v) = ½ trace ∇̂²φ(v) − ½ φ(Ric̆^# v) + (L_Aφ)(v)`, returned as a covector.
pub fn weitzenbock_rhs_1form<P>(sys: &SdeSystem, p: &Point, phi: P) -> GResult<Vector>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let lg = LocalGeometry::new(sys, p)?;
    let trace = adjoint_trace_cov_2tensor(sys, p, |y| adjoint_cov_form(sys, &p.chart, &phi, y))?;
    let ph = phi(&p.x)?;
    let ric_term = lg.ricci_sharp().transpose() * &ph;
    let a_field = |y: &Vector| -> GResult<Vector> { Ok(sys.drift(&p.chart, y)?) };
    let la = lie_derivative_form(&sys.oracle, a_field, &phi, &p.x)?;
    Ok(trace * 0.5 - ric_term * 0.5 + la)
}

/// `𝒜¹φ = −½(δ̄dφ + dδ̄φ) + L_Aφ`.
pub fn generator_1form_via_codifferential<P>(sys: &SdeSystem, p: &Point, phi: P) -> GResult<Vector>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let o = &sys.oracle;
    let d_phi = |y: &Vector| -> GResult<Mat> {
        let j = o.jacobian(&phi, y)?; // (k, j) = ∂_jφ_k
        Ok(j.transpose() - j)
    };
    // (δ̄ω)_k = −g^{aj}(∇̂ω)_{ajk}.
    let delta_d = -adjoint_trace_cov_2tensor(sys, p, d_phi)?;
    let delta = |y: &Vector| bar_delta(sys, &Point { chart: p.chart.clone(), x: y.clone() }, &phi);
    let d_delta = scalar_gradient(o, delta, &p.x)?;
    let a_field = |y: &Vector| -> GResult<Vector> { Ok(sys.drift(&p.chart, y)?) };
    let la = lie_derivative_form(o, a_field, &phi, &p.x)?;
    Ok(-(delta_d + d_delta) * 0.5 + la)
}

/// `𝒜¹φ = ½ Σᵢ L_{Xⁱ}L_{Xⁱ}φ + L_Aφ`, the generator of `E ξ_t^*φ`.
pub fn generator_1form_via_lie<P>(sys: &SdeSystem, p: &Point, phi: P) -> GResult<Vector>
where
    P: Fn(&Vector) -> GResult<Vector>,
{
    let o = &sys.oracle;
    let mut acc = Vector::zeros(sys.n);
    for i in 0..sys.m {
        let xi = |y: &Vector| -> GResult<Vector> { Ok(sys.coeff_x(&p.chart, y)?.column(i).into_owned()) };
        let inner = |y: &Vector| lie_derivative_form(o, xi, &phi, y);
        acc += lie_derivative_form(o, xi, inner, &p.x)?;
    }
    let a_field = |y: &Vector| -> GResult<Vector> { Ok(sys.drift(&p.chart, y)?) };
    Ok(acc * 0.5 + lie_derivative_form(o, a_field, &phi, &p.x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_scenario, ScenarioSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    fn flat() -> SdeSystem {
        build_scenario(&ScenarioSpec::Flat { n: 2, ou_rate: 0.0, guard_radius: 1e6 }).unwrap()
    }

    fn sphere() -> SdeSystem {
        build_scenario(&ScenarioSpec::SphereGradient { n: 2 }).unwrap()
    }

    fn so3() -> SdeSystem {
        build_scenario(&ScenarioSpec::So3LeftInvariant { drift: None }).unwrap()
    }

    fn twisted(alpha: f64) -> SdeSystem {
        build_scenario(&ScenarioSpec::TwistedPlane { alpha }).unwrap()
    }

    #[test]
    fn induced_metric_examples() {
        let mp = induced_metric(&flat(), &Point::global(v(&[0.3, -1.0]))).unwrap();
        assert_eq!(mp.g, Mat::identity(2, 2));
        assert_eq!(mp.y, Mat::identity(2, 2));
        let s = sphere();
        let p = s.point_from_coords(&[0.0, 0.0, 1.0]).unwrap();
        let mp = induced_metric(&s, &p).unwrap();
        // At u = 0 the stereographic metric is 4/(1+|u|²)² · I = 4I, which is
        // the identity on the tangent plane of the embedding (|dp/du| = 2).
        let demb = s.observable_jacobian(&p);
        let pulled = demb.transpose() * &demb;
        assert!((&mp.g - pulled).norm() < 1e-12);
        let e3 = v(&[0.0, 0.0, 1.0]);
        assert!((mp.p_n - &e3 * e3.transpose()).norm() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            let p = twisted(0.7).sample_point(&mut rng);
            let mp = induced_metric(&twisted(0.7), &p).unwrap();
            assert!((mp.g - Mat::identity(2, 2)).norm() < 1e-14);
        }
    }

    #[test]
    fn degenerate_x_is_reported() {
        let spec = ScenarioSpec::Custom {
            n: 1,
            m: 2,
            x: vec![vec!["x1 - 0.5".into(), "0".into()]],
            a: None,
            guard_radius: 10.0,
        };
        let sys = build_scenario(&spec).unwrap();
        assert!(matches!(induced_metric(&sys, &Point::global(v(&[0.5]))), Err(GeometryError::DegenerateX(_))));
    }

    #[test]
    fn christoffel_examples() {
        let g = lw_christoffel(&flat(), &Point::global(v(&[0.2, 0.1]))).unwrap();
        assert_eq!(g.max_abs(), 0.0);
        let s = sphere();
        let origin = Point { chart: Chart::Stereo(crate::model::Pole::North), x: v(&[0.0, 0.0]) };
        assert!(levi_civita_christoffel(&s, &origin).unwrap().max_abs() < 1e-9);
        let tw = twisted(0.5);
        assert!(levi_civita_christoffel(&tw, &Point::global(v(&[0.4, 1.0]))).unwrap().max_abs() < 1e-9);
        // Twisted plane: Γ̆(v, ·) = −α v¹ J with J the rotation generator.
        let lw = lw_christoffel(&tw, &Point::global(v(&[0.4, 1.0]))).unwrap();
        assert!((lw.get(0, 0, 1) - 0.5).abs() < 1e-9);
        assert!((lw.get(1, 0, 0) + 0.5).abs() < 1e-9);
        assert!(lw.get(0, 1, 1).abs() < 1e-12);
    }

    #[test]
    fn sphere_lw_equals_levi_civita() {
        let s = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let p = s.sample_point(&mut rng);
            let lw = lw_christoffel(&s, &p).unwrap();
            let lc = levi_civita_christoffel(&s, &p).unwrap();
            assert!(lw.max_abs_diff(&lc) < 1e-5);
        }
    }

    #[test]
    fn closed_form_levi_civita_matches_metric_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for sys in [sphere(), so3(), twisted(0.5), custom_system()] {
            for _ in 0..3 {
                let p = sys.sample_point(&mut rng);
                let a = levi_civita_from_local(&LocalGeometry::new(&sys, &p).unwrap());
                assert!(a.max_abs_diff(&levi_civita_christoffel(&sys, &p).unwrap()) < 1e-7, "{}", sys.name);
            }
        }
        let s = sphere();
        for _ in 0..5 {
            let p = s.sample_point(&mut rng);
            let ric = ricci_levi_civita(&s, &p).unwrap();
            let g = induced_metric(&s, &p).unwrap().g;
            assert!((ric.ric - &g).amax() < 1e-7 * g.amax());
        }
    }

    #[test]
    fn so3_torsion_is_minus_bracket() {
        let g = so3();
        let p = Point { chart: Chart::Group(nalgebra::UnitQuaternion::identity()), x: v(&[0.0, 0.0, 0.0]) };
        let t = lw_christoffel(&g, &p).unwrap().torsion();
        let t12 = t.apply(&v(&[1.0, 0.0, 0.0]), &v(&[0.0, 1.0, 0.0]));
        assert!((t12 - v(&[0.0, 0.0, -1.0])).norm() < 1e-6);
    }

    #[test]
    fn route_equivalences_at_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for sys in [sphere(), so3(), twisted(0.5), flat()] {
            for _ in 0..5 {
                let p = sys.sample_point(&mut rng);
                let lw = lw_christoffel(&sys, &p).unwrap();
                assert!(lw.max_abs_diff(&lw_christoffel_via_inner_products(&sys, &p).unwrap()) < 1e-5);
                assert!(lw.max_abs_diff(&lw_christoffel_via_brackets(&sys, &p, &mut rng).unwrap()) < 1e-5);
                let t = lw.torsion();
                assert!(t.max_abs_diff(&torsion_via_dy(&sys, &p).unwrap()) < 1e-5);
                assert!(t.max_abs_diff(&torsion_via_bracket(&sys, &p).unwrap()) < 1e-4);
                assert_eq!(lw.transpose_lower().torsion(), t.scaled(-1.0));
                let lg = LocalGeometry::new(&sys, &p).unwrap();
                let direct = lg.curvature_tensor();
                let via = curvature(&sys, &p, Connection::LeJanWatanabe).unwrap();
                assert!(direct.max_abs_diff(&via) < 1e-4, "{}", direct.max_abs_diff(&via));
                assert!(direct.antisymmetry_defect() < 1e-12);
                assert!(via.antisymmetry_defect() == 0.0);
            }
        }
    }

    #[test]
    fn sphere_curvature_and_ricci() {
        let s = sphere();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let p = s.sample_point(&mut rng);
            let mp = induced_metric(&s, &p).unwrap();
            let (u, w) = (v(&[1.0, 0.3]), v(&[-0.2, 0.8]));
            for conn in [Connection::LeJanWatanabe, Connection::LeviCivita] {
                let r = curvature(&s, &p, conn).unwrap();
                assert!((sectional_curvature(&r, &mp.g, &u, &w) - 1.0).abs() < 1e-3);
            }
            let ric = ricci(&s, &p, Connection::LeJanWatanabe).unwrap();
            assert!((&ric.ric - &mp.g).norm() < 1e-3 * mp.g.norm());
            let lg = LocalGeometry::new(&s, &p).unwrap();
            assert!((lg.ricci_sharp() - Mat::identity(2, 2)).norm() < 1e-8);
        }
    }

    #[test]
    fn so3_is_flat_for_lw() {
        let g = so3();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let p = g.sample_point(&mut rng);
            assert!(curvature(&g, &p, Connection::LeJanWatanabe).unwrap().max_abs() < 1e-4);
            assert!(LocalGeometry::new(&g, &p).unwrap().curvature_tensor().max_abs() < 1e-5);
            let ric_lc = ricci(&g, &p, Connection::LeviCivita).unwrap();
            let lg = LocalGeometry::new(&g, &p).unwrap();
            let frame = lg.in_orthonormal_frame(&ric_lc.ric).unwrap();
            assert!((frame - Mat::identity(3, 3) * 0.5).norm() < 1e-4);
        }
    }

    #[test]
    fn metricity_and_tss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (sys, tss) in [(sphere(), true), (so3(), true), (flat(), true), (twisted(0.5), false)] {
            let p = sys.sample_point(&mut rng);
            let lw = lw_christoffel(&sys, &p).unwrap();
            let r = metricity_check(&sys, &p, &lw, &mut rng, 10).unwrap();
            assert!(r.norm_form < 1e-6 && r.xi_form < 1e-6, "{r:?}");
            let lc = levi_civita_christoffel(&sys, &p).unwrap();
            let r = metricity_check(&sys, &p, &lc, &mut rng, 10).unwrap();
            assert!(r.norm_form < 1e-6, "{r:?}");
            let rep = tss_check(&sys, &p).unwrap();
            assert_eq!(rep.is_tss, tss, "{} {rep:?}", sys.name);
            assert_eq!(rep.levi_civita_residual < TSS_TOL, tss);
            let adj = metricity_check(&sys, &p, &lw.transpose_lower(), &mut rng, 10).unwrap();
            assert_eq!(adj.norm_form < 1e-6, tss, "{} {adj:?}", sys.name);
        }
    }

    #[test]
    fn levi_civita_split_and_stratonovich_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for sys in [sphere(), so3(), flat()] {
            let p = sys.sample_point(&mut rng);
            let r = levi_civita_split_check(&sys, &p, &mut rng, 10).unwrap();
            assert!(r.residual < 1e-5 && r.summed_residual < 1e-6, "{} {r:?}", sys.name);
            let (lw, lc) = stratonovich_correction(&sys, &p).unwrap();
            assert!(lw.amax() < 1e-6);
            assert!(lc.amax() < 1e-6);
        }
        let tw = twisted(0.5);
        let p = tw.sample_point(&mut rng);
        let (lw, _) = stratonovich_correction(&tw, &p).unwrap();
        assert!(lw.amax() < 1e-6);
    }

    #[test]
    fn h_p_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = flat();
        assert_eq!(h_p(&f, &Point::global(v(&[0.1, 0.2])), &v(&[1.0, 0.0]), 3.0).unwrap(), 0.0);
        assert_eq!(h_p(&f, &Point::global(v(&[0.1, 0.2])), &v(&[0.0, 0.0]), 3.0), Err(GeometryError::ZeroVector));
        let s = sphere();
        for _ in 0..5 {
            let p = s.sample_point(&mut rng);
            let form = HpForm::new(&LocalGeometry::new(&s, &p).unwrap());
            let (lo, hi) = form.extremes(2.0, &mut rng).unwrap();
            assert!(lo.abs() < 1e-6 && hi.abs() < 1e-6);
            let (lo, hi) = form.extremes(4.0, &mut rng).unwrap();
            assert!((hi - lo).abs() < 1e-4);
            assert!((hi - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn generator_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let f = |y: &Vector| -> GResult<f64> { Ok(y[0] * y[0] + (y[1]).sin()) };
        for sys in [flat(), twisted(0.5), sphere()] {
            for _ in 0..3 {
                let p = sys.sample_point(&mut rng);
                let fc = chart_scalar(&sys, &p.chart, f);
                let a = generator_lw(&sys, &p, &fc).unwrap();
                let b = generator_levi_civita(&sys, &p, &fc).unwrap();
                assert!((a - b).abs() < 1e-6, "{} {a} {b}", sys.name);
            }
        }
        // Height on S²: 𝒜⁰z = −z.
        let s = sphere();
        let height = |y: &Vector| -> GResult<f64> { Ok(y[2]) };
        for _ in 0..5 {
            let p = s.sample_point(&mut rng);
            let z = s.observable(&p)[2];
            let a = generator_lw(&s, &p, chart_scalar(&s, &p.chart, height)).unwrap();
            assert!((a + z).abs() < 1e-6);
        }
    }

    #[test]
    fn one_form_routes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let fl = flat();
        let dx1 = |_: &Vector| -> GResult<Vector> { Ok(v(&[1.0, 0.0])) };
        let p = fl.sample_point(&mut rng);
        assert!(weitzenbock_rhs_1form(&fl, &p, dx1).unwrap().amax() < 1e-9);
        assert!(bar_delta(&fl, &p, dx1).unwrap().abs() < 1e-9);
        let x2dx1 = |y: &Vector| -> GResult<Vector> { Ok(v(&[y[1], 0.0])) };
        assert!(weitzenbock_rhs_1form(&fl, &p, x2dx1).unwrap().amax() < 1e-6);
        let x2sq = |y: &Vector| -> GResult<Vector> { Ok(v(&[y[1] * y[1], 0.0])) };
        assert!((weitzenbock_rhs_1form(&fl, &p, x2sq).unwrap() - v(&[1.0, 0.0])).amax() < 1e-5);

        let omega = |q: &Vector| -> GResult<Vector> {
            let d = q.len();
            Ok(Vector::from_fn(d, |i, _| (q[(i + 1) % d]).sin() + 0.3 * q[i] * q[0]))
        };
        for sys in [sphere(), custom_system(), twisted(0.5)] {
            for _ in 0..3 {
                let p = sys.sample_point(&mut rng);
                let phi = chart_one_form(&sys, &p.chart, omega);
                let w = weitzenbock_rhs_1form(&sys, &p, &phi).unwrap();
                let l = generator_1form_via_lie(&sys, &p, &phi).unwrap();
                let c = generator_1form_via_codifferential(&sys, &p, &phi).unwrap();
                assert!((&w - &l).amax() < 1e-4, "{} {w} {l}", sys.name);
                assert!((&c - &l).amax() < 1e-4, "{} {c} {l}", sys.name);
                let d1 = bar_delta(&sys, &p, &phi).unwrap();
                let d2 = bar_delta_lie(&sys, &p, &phi).unwrap();
                assert!((d1 - d2).abs() < 1e-5, "{} {d1} {d2}", sys.name);
            }
        }
    }

    fn custom_system() -> SdeSystem {
        build_scenario(&ScenarioSpec::Custom {
            n: 2,
            m: 3,
            x: vec![
                vec!["1 + 0.2*sin(x2)".into(), "0.3*x1".into(), "0".into()],
                vec!["0".into(), "1".into(), "0.5*cos(x1)".into()],
            ],
            a: Some(vec!["0.1*x2".into(), "-0.2".into()]),
            guard_radius: 10.0,
        })
        .unwrap()
    }
}
