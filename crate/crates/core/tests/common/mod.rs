//! Independent re-implementations used as test oracles. They share no code
//! with the library beyond its public types.
#![allow(dead_code)]

use nalgebra::{DMatrix, SymmetricEigen};

/// Row-major dense matrix as nested vectors.
pub type Rows = Vec<Vec<f64>>;

pub fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn mat_vec(m: &Rows, v: &[f64]) -> Vec<f64> {
    m.iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One step of the plant/predictor/actuator equations written out directly.
/// `sigma` in {1, 0, -1}; returns `(x⁺, x̂, û)`.
pub fn component_step(
    a: &Rows,
    b: &Rows,
    k: &Rows,
    x: &[f64],
    xhat_prev: &[f64],
    uhat_prev: &[f64],
    sigma: i8,
    delivered: bool,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let xhat = if sigma == -1 && delivered {
        x.to_vec()
    } else {
        add(&mat_vec(a, xhat_prev), &mat_vec(b, uhat_prev))
    };
    let uhat = if sigma == 1 && delivered {
        mat_vec(k, &xhat)
    } else {
        uhat_prev.to_vec()
    };
    let x_next = add(&mat_vec(a, x), &mat_vec(b, &uhat));
    (x_next, xhat, uhat)
}

/// `(P(σ=1), P(σ=0), P(σ=-1))` of the ε-greedy mixture.
pub fn switch_probs(eps: f64, p: f64, q: f64) -> [f64; 3] {
    let explore = eps / 2.0;
    [explore + (1.0 - eps) * p, (1.0 - eps) * (1.0 - p - q), explore + (1.0 - eps) * q]
}

/// Probabilities of modes 1..=5.
pub fn mode_probs(delta: f64, eps: f64, p: f64, q: f64) -> [f64; 5] {
    let [plus, zero, minus] = switch_probs(eps, p, q);
    [delta * plus, (1.0 - delta) * plus, delta * minus, (1.0 - delta) * minus, zero]
}

/// Largest eigenvalue of `Σⱼ Pⱼ ΓⱼᵀVΓⱼ - V`.
pub fn lyapunov_margin(probs: &[f64; 5], gammas: &[DMatrix<f64>; 5], v: &DMatrix<f64>) -> f64 {
    let mut r = -v.clone();
    for (p, g) in probs.iter().zip(gammas) {
        r += g.transpose() * v * g * *p;
    }
    let r = (&r + r.transpose()) * 0.5;
    SymmetricEigen::new(r).eigenvalues.max()
}

pub fn min_eigenvalue(v: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new((v + v.transpose()) * 0.5).eigenvalues.min()
}

/// Spectral radius of `Σⱼ Pⱼ Γⱼ ⊗ Γⱼ`, the second-moment operator.
pub fn second_moment_radius(probs: &[f64; 5], gammas: &[DMatrix<f64>; 5]) -> f64 {
    let d = gammas[0].nrows();
    let mut op = DMatrix::<f64>::zeros(d * d, d * d);
    for (p, g) in probs.iter().zip(gammas) {
        op += g.kronecker(g) * *p;
    }
    op.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}
