//! Small dense linear algebra and the finite-difference derivative oracle.
//!
//! Every derivative of a coefficient field (DX, DA, Dg, derivatives of
//! Christoffel symbols) goes through [`DerivOracle`]: central differences
//! refined by Richardson extrapolation. Dimensions in this crate are tiny
//! (n, m <= 16), so everything is dense.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Mat = DMatrix<f64>;
pub type Vector = DVector<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericError {
    #[error("matrix is not symmetric positive definite")]
    NotSpd,
    #[error("matrix is singular")]
    Singular,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
}

/// Solves `a x = b` for symmetric positive definite `a` by Cholesky.
pub fn solve_spd(a: &Mat, b: &Vector) -> Result<Vector, NumericError> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(NumericError::Dimension { expected: n, got: a.ncols() });
    }
    if b.len() != n {
        return Err(NumericError::Dimension { expected: n, got: b.len() });
    }
    let scale = a.amax().max(1.0);
    for i in 0..n {
        for j in i + 1..n {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(NumericError::NotSpd);
            }
        }
    }
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(NumericError::NotSpd)?;
    Ok(chol.solve(b))
}

/// Inverse of a symmetric positive definite matrix.
pub fn inverse_spd(a: &Mat) -> Result<Mat, NumericError> {
    let chol = nalgebra::Cholesky::new(a.clone()).ok_or(NumericError::NotSpd)?;
    Ok(chol.inverse())
}

/// General inverse via LU.
pub fn inverse(a: &Mat) -> Result<Mat, NumericError> {
    a.clone().try_inverse().ok_or(NumericError::Singular)
}

/// Upper-triangular `L` with `g = Lᵀ L`, so that `|v|_g = |L v|`.
pub fn metric_root(g: &Mat) -> Result<Mat, NumericError> {
    let chol = nalgebra::Cholesky::new(g.clone()).ok_or(NumericError::NotSpd)?;
    Ok(chol.l().transpose())
}

/// Orthogonal polar factor `U Vᵀ` of a square matrix.
pub fn polar_factor(a: &Mat) -> Mat {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    u * v_t
}

/// Polar factor of a rank-deficient map: the partial isometry with the same
/// row and column spaces, keeping singular values above `rel_tol * σ_max`.
pub fn partial_polar_factor(a: &Mat, rel_tol: f64) -> Mat {
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let smax = svd.singular_values.max();
    let mut out = Mat::zeros(a.nrows(), a.ncols());
    if smax == 0.0 {
        return out;
    }
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > rel_tol * smax {
            out += u.column(k) * v_t.row(k);
        }
    }
    out
}

/// Symmetric eigenvalues in ascending order.
pub fn sym_eigenvalues(a: &Mat) -> Vec<f64> {
    let sym = (a + a.transpose()) * 0.5;
    let mut ev: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Largest singular value.
pub fn operator_norm(a: &Mat) -> f64 {
    a.clone().singular_values().max()
}

/// Pairwise (cascade) summation over a fixed binary tree. The result depends
/// only on the order of `xs`, never on how work was scheduled.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 8;
    if xs.len() <= LEAF {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sample mean and standard error of the mean (unbiased variance).
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Finite-difference derivative oracle.
///
/// Central differences with base step `h0 · max(1, |x|)` and
/// `richardson_levels` rounds of Richardson extrapolation (each level
/// halves the step and removes the next even power of h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivOracle {
    pub h0: f64,
    pub richardson_levels: u32,
}

impl Default for DerivOracle {
    fn default() -> Self {
        Self { h0: 1e-4, richardson_levels: 1 }
    }
}

impl DerivOracle {
    pub fn new(h0: f64, richardson_levels: u32) -> Result<Self, String> {
        if !(h0 > 0.0 && h0.is_finite()) {
            return Err(format!("oracle step must be positive, got {h0}"));
        }
        Ok(Self { h0, richardson_levels })
    }

    fn step(&self, x: &Vector) -> f64 {
        self.h0 * x.norm().max(1.0)
    }

    /// `Df(x)(v)` for a vector-valued `f`.
    pub fn directional_derivative<F, E>(&self, f: F, x: &Vector, v: &Vector) -> Result<Vector, E>
    where
        F: Fn(&Vector) -> Result<Vector, E>,
    {
        let speed = v.norm();
        if speed == 0.0 {
            let fx = f(x)?;
            return Ok(Vector::zeros(fx.len()));
        }
        let dir = v / speed;
        let h = self.step(x);
        let mut err: Option<E> = None;
        let result = self.richardson(h, |hi| {
            let plus = f(&(x + &dir * hi));
            let minus = f(&(x - &dir * hi));
            match (plus, minus) {
                (Ok(p), Ok(m)) => Some((p - m) / (2.0 * hi)),
                (Err(e), _) | (_, Err(e)) => {
                    err = Some(e);
                    None
                }
            }
        });
        match result {
            Some(d) => Ok(d * speed),
            None => Err(err.expect("error recorded")),
        }
    }

    /// Mixed second derivative `D²f(x)(u, v)`.
    pub fn second_derivative<F, E>(&self, f: F, x: &Vector, u: &Vector, v: &Vector) -> Result<Vector, E>
    where
        F: Fn(&Vector) -> Result<Vector, E>,
    {
        let (su, sv) = (u.norm(), v.norm());
        if su == 0.0 || sv == 0.0 {
            let fx = f(x)?;
            return Ok(Vector::zeros(fx.len()));
        }
        let (du, dv) = (u / su, v / sv);
        let h = self.step(x);
        let mut err: Option<E> = None;
        let result = self.richardson(h, |hi| {
            let pp = f(&(x + &du * hi + &dv * hi));
            let pm = f(&(x + &du * hi - &dv * hi));
            let mp = f(&(x - &du * hi + &dv * hi));
            let mm = f(&(x - &du * hi - &dv * hi));
            match (pp, pm, mp, mm) {
                (Ok(pp), Ok(pm), Ok(mp), Ok(mm)) => Some((pp - pm - mp + mm) / (4.0 * hi * hi)),
                (Err(e), _, _, _) | (_, Err(e), _, _) | (_, _, Err(e), _) | (_, _, _, Err(e)) => {
                    err = Some(e);
                    None
                }
            }
        });
        match result {
            Some(d) => Ok(d * (su * sv)),
            None => Err(err.expect("error recorded")),
        }
    }

    /// Jacobian matrix: column j is `Df(x)(e_j)`.
    pub fn jacobian<F, E>(&self, f: F, x: &Vector) -> Result<Mat, E>
    where
        F: Fn(&Vector) -> Result<Vector, E>,
    {
        let n = x.len();
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let e = Vector::from_fn(n, |i, _| if i == j { 1.0 } else { 0.0 });
            cols.push(self.directional_derivative(&f, x, &e)?);
        }
        Ok(Mat::from_columns(&cols))
    }

    /// Richardson tableau over step sizes h, h/2, ..., h/2^L. Central
    /// differences have an even error expansion, so level k removes h^{2k}.
    fn richardson(&self, h: f64, mut estimate: impl FnMut(f64) -> Option<Vector>) -> Option<Vector> {
        let levels = self.richardson_levels as usize;
        let mut prev_row: Vec<Vector> = Vec::new();
        for i in 0..=levels {
            let hi = h / f64::powi(2.0, i as i32);
            let mut row = Vec::with_capacity(i + 1);
            row.push(estimate(hi)?);
            let mut factor = 4.0;
            for k in 1..=i {
                let refined = &row[k - 1] + (&row[k - 1] - &prev_row[k - 1]) / (factor - 1.0);
                row.push(refined);
                factor *= 4.0;
            }
            prev_row = row;
        }
        prev_row.pop()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vec(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn solve_spd_identity() {
        let x = solve_spd(&Mat::identity(3, 3), &vec(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x, vec(&[1.0, 2.0, 3.0]));
    }

    #[test]
    fn solve_spd_diagonal_and_coupled() {
        let a = Mat::from_diagonal(&vec(&[2.0, 4.0]));
        let x = solve_spd(&a, &vec(&[2.0, 4.0])).unwrap();
        assert!((x - vec(&[1.0, 1.0])).norm() < 1e-14);

        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let x = solve_spd(&a, &vec(&[3.0, 3.0])).unwrap();
        assert!((x - vec(&[1.0, 1.0])).norm() < 1e-14);
    }

    #[test]
    fn solve_spd_rejects_indefinite_and_asymmetric() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(solve_spd(&a, &vec(&[1.0, 1.0])), Err(NumericError::NotSpd));
        let a = Mat::from_row_slice(2, 2, &[2.0, 1.0, 0.0, 2.0]);
        assert_eq!(solve_spd(&a, &vec(&[1.0, 1.0])), Err(NumericError::NotSpd));
    }

    #[test]
    fn directional_derivative_examples() {
        let o = DerivOracle::default();
        let sq = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[x[0] * x[0]])) };
        let d = o.directional_derivative(sq, &vec(&[3.0]), &vec(&[1.0])).unwrap();
        assert!((d[0] - 6.0).abs() < 1e-10 * 6.0);

        let f = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[x[0].sin(), x[1]])) };
        let d = o.directional_derivative(f, &vec(&[0.0, 1.0]), &vec(&[1.0, 0.0])).unwrap();
        assert!((d - vec(&[1.0, 0.0])).norm() < 1e-10);

        let e = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[x[0].exp()])) };
        let d = o.directional_derivative(e, &vec(&[1.0]), &vec(&[1.0])).unwrap();
        assert!((d[0] - std::f64::consts::E).abs() < 1e-9);
    }

    #[test]
    fn quadratic_derivative_is_exact_at_one_level() {
        let o = DerivOracle::default();
        let q = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[3.0 * x[0] * x[0] - 2.0 * x[0] * x[1] + 5.0 * x[1] + 7.0])) };
        let x = vec(&[0.7, -1.3]);
        let d = o.directional_derivative(q, &x, &vec(&[0.4, 0.9])).unwrap();
        let exact = (6.0 * x[0] - 2.0 * x[1]) * 0.4 + (-2.0 * x[0] + 5.0) * 0.9;
        assert!((d[0] - exact).abs() <= 1e-10 * exact.abs());
    }

    #[test]
    fn second_derivative_examples() {
        let o = DerivOracle::default();
        let e1 = vec(&[1.0, 0.0]);
        let e2 = vec(&[0.0, 1.0]);
        let prod = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[x[0] * x[1]])) };
        let d = o.second_derivative(prod, &vec(&[0.3, -0.2]), &e1, &e2).unwrap();
        assert!((d[0] - 1.0).abs() < 1e-6);

        let q = Mat::from_row_slice(2, 2, &[1.5, -0.5, -0.5, 2.0]);
        let qf = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[(x.transpose() * &q * x)[0]])) };
        for (a, u) in [&e1, &e2].iter().enumerate() {
            for (b, v) in [&e1, &e2].iter().enumerate() {
                let d = o.second_derivative(&qf, &vec(&[0.1, 0.4]), u, v).unwrap();
                assert!((d[0] - 2.0 * q[(a, b)]).abs() < 1e-6);
            }
        }

        let sc = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[x[0].sin() * x[1].cos()])) };
        let d = o.second_derivative(sc, &vec(&[0.0, 0.0]), &e1, &e2).unwrap();
        assert!(d[0].abs() < 1e-8);
    }

    #[test]
    fn errors_propagate_from_probes() {
        let o = DerivOracle::default();
        let bad = |x: &Vector| -> Result<Vector, &'static str> {
            if x[0] > 0.0 { Err("boom") } else { Ok(x.clone()) }
        };
        assert_eq!(o.directional_derivative(bad, &vec(&[0.0]), &vec(&[1.0])), Err("boom"));
    }

    #[test]
    fn pairwise_sum_matches_naive_on_small_inputs() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&xs), 2475.0);
        let (m, se) = mean_and_se(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn partial_polar_keeps_rank() {
        let p = vec(&[0.0, 0.6, 0.8]);
        let k = &p * p.transpose() * 2.5;
        let u = partial_polar_factor(&k, 1e-8);
        assert!((&u - &p * p.transpose()).norm() < 1e-12);
    }

    fn spd_strategy() -> impl Strategy<Value = (Mat, Vector)> {
        (1usize..=6).prop_flat_map(|n| {
            (
                proptest::collection::vec(-1.0f64..1.0, n * n),
                proptest::collection::vec(-5.0f64..5.0, n),
            )
                .prop_map(move |(entries, b)| {
                    let m = Mat::from_row_slice(n, n, &entries);
                    let a = &m * m.transpose() + Mat::identity(n, n) * 0.5;
                    (a, Vector::from_vec(b))
                })
        })
    }

    proptest! {
        #[test]
        fn solve_spd_inverts_multiply((a, x) in spd_strategy()) {
            let b = &a * &x;
            let y = solve_spd(&a, &b).unwrap();
            let resid = (&a * &y - &b).norm() / b.norm().max(1e-300);
            prop_assert!(resid <= 1e-10 || b.norm() < 1e-12);
            prop_assert!((y - x).norm() <= 1e-8 * (1.0 + b.norm()));
        }

        #[test]
        fn directional_derivative_is_linear(
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            u in proptest::collection::vec(-1.0f64..1.0, 3),
            v in proptest::collection::vec(-1.0f64..1.0, 3),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let o = DerivOracle::default();
            let f = |x: &Vector| -> Result<Vector, ()> {
                Ok(vec(&[x[0].sin() * x[1], (x[2] * x[0]).exp(), x[1] * x[1] * x[2]]))
            };
            let (x, u, v) = (Vector::from_vec(x), Vector::from_vec(u), Vector::from_vec(v));
            let lhs = o.directional_derivative(f, &x, &(&u * a + &v * b)).unwrap();
            let rhs = o.directional_derivative(f, &x, &u).unwrap() * a + o.directional_derivative(f, &x, &v).unwrap() * b;
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }

        #[test]
        fn second_derivative_is_symmetric(
            x in proptest::collection::vec(-1.0f64..1.0, 2),
            u in proptest::collection::vec(-1.0f64..1.0, 2),
            v in proptest::collection::vec(-1.0f64..1.0, 2),
        ) {
            let o = DerivOracle::default();
            let f = |x: &Vector| -> Result<Vector, ()> { Ok(vec(&[(x[0] * x[1]).cos() + x[0].powi(3)])) };
            let (x, u, v) = (Vector::from_vec(x), Vector::from_vec(u), Vector::from_vec(v));
            let uv = o.second_derivative(f, &x, &u, &v).unwrap();
            let vu = o.second_derivative(f, &x, &v, &u).unwrap();
            prop_assert!((&uv - &vu).norm() <= 1e-5 * (1.0 + uv.norm()));
        }
    }
}
