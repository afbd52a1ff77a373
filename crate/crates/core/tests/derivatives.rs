//! Finite-difference oracle on parsed expressions against hand-written
//! derivatives.

use sdegeo::expr::Expr;
use sdegeo::numeric::{DerivOracle, Vector};

type Grad = fn(&[f64]) -> [f64; 3];

fn cases() -> Vec<(&'static str, Grad)> {
    vec![
        ("x1*x2 + x3", |x| [x[1], x[0], 1.0]),
        ("sin(x1)*cos(x2)", |x| [x[0].cos() * x[1].cos(), -x[0].sin() * x[1].sin(), 0.0]),
        ("exp(-x1^2/2)", |x| [-x[0] * (-x[0] * x[0] / 2.0).exp(), 0.0, 0.0]),
        ("sqrt(1 + x1^2 + x2^2)", |x| {
            let r = (1.0 + x[0] * x[0] + x[1] * x[1]).sqrt();
            [x[0] / r, x[1] / r, 0.0]
        }),
        ("log(2 + x3^2)", |x| [0.0, 0.0, 2.0 * x[2] / (2.0 + x[2] * x[2])]),
        ("x1^3 - 2*x1*x3^2", |x| [3.0 * x[0] * x[0] - 2.0 * x[2] * x[2], 0.0, -4.0 * x[0] * x[2]]),
        ("tanh(x2 - x3)", |x| {
            let s = 1.0 - (x[1] - x[2]).tanh().powi(2);
            [0.0, s, -s]
        }),
        ("x1/(1 + x2^2)", |x| {
            let d = 1.0 + x[1] * x[1];
            [1.0 / d, -2.0 * x[0] * x[1] / (d * d), 0.0]
        }),
        ("tan(x1*x3/4)", |x| {
            let s = 1.0 + (x[0] * x[2] / 4.0).tan().powi(2);
            [s * x[2] / 4.0, 0.0, s * x[0] / 4.0]
        }),
        ("-(x2^2) + 0.3*x1*x2*x3", |x| [0.3 * x[1] * x[2], -2.0 * x[1] + 0.3 * x[0] * x[2], 0.3 * x[0] * x[1]]),
    ]
}

#[test]
fn oracle_gradients_match_closed_forms() {
    let oracle = DerivOracle::default();
    let points = [[0.3, -0.7, 1.1], [-1.2, 0.4, 0.05], [2.0, 1.5, -0.8]];
    for (src, grad) in cases() {
        let e = Expr::parse(src).unwrap();
        let f = |y: &Vector| e.eval(y.as_slice()).map(|v| Vector::from_element(1, v));
        for p in points {
            let x = Vector::from_column_slice(&p);
            let exact = grad(&p);
            for (i, want) in exact.iter().enumerate() {
                let dir = Vector::from_fn(3, |k, _| if k == i { 1.0 } else { 0.0 });
                let got = oracle.directional_derivative(f, &x, &dir).unwrap()[0];
                assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "{src} ∂{i} at {p:?}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn oracle_second_derivative_matches_closed_form() {
    let oracle = DerivOracle::default();
    let e = Expr::parse("sin(x1)*x2^2").unwrap();
    let f = |y: &Vector| e.eval(y.as_slice()).map(|v| Vector::from_element(1, v));
    let x = Vector::from_column_slice(&[0.4, -1.3]);
    let (e1, e2) = (Vector::from_column_slice(&[1.0, 0.0]), Vector::from_column_slice(&[0.0, 1.0]));
    let mixed = oracle.second_derivative(f, &x, &e1, &e2).unwrap()[0];
    assert!((mixed - 2.0 * x[1] * x[0].cos()).abs() < 1e-6, "{mixed}");
    let pure = oracle.second_derivative(f, &x, &e1, &e1).unwrap()[0];
    assert!((pure + x[0].sin() * x[1] * x[1]).abs() < 1e-6, "{pure}");
}
