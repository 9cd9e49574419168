//! Dense solvers for the Schur-complement system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ConstraintLinearSolver {
    #[default]
    DenseCholesky,
    DenseCg,
    DensePcgJacobi,
    DenseCr,
    DensePcrJacobi,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DenseSolveReport {
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub converged: bool,
    /// The final residual is not below the initial one, or is not finite.
    pub stagnated: bool,
}

impl DenseSolveReport {
    /// Combines reports from independent blocks.
    pub fn merge(&mut self, other: &DenseSolveReport) {
        self.iterations = self.iterations.max(other.iterations);
        self.initial_residual = self.initial_residual.hypot(other.initial_residual);
        self.final_residual = self.final_residual.hypot(other.final_residual);
        self.converged &= other.converged;
        self.stagnated |= other.stagnated;
    }
}

/// Solves `Z x = rhs`. Iterative methods start from zero and stop when
/// `‖r‖ ≤ tol·‖rhs‖` or after `max_iter` iterations, returning the iterate
/// with the smallest residual. They assume a symmetric `Z`; the Cholesky
/// path switches to LU when `Z` is not symmetric.
pub fn solve_dense(
    z: &DMatrix<f64>,
    rhs: &DVector<f64>,
    kind: ConstraintLinearSolver,
    max_iter: usize,
    tol: f64,
) -> (DVector<f64>, DenseSolveReport) {
    let n = rhs.len();
    let bnorm = rhs.norm();
    let mut report = DenseSolveReport { initial_residual: bnorm, final_residual: bnorm, ..Default::default() };
    if n == 0 || bnorm == 0.0 {
        report.converged = true;
        return (DVector::zeros(n), report);
    }
    let x = match kind {
        ConstraintLinearSolver::DenseCholesky => {
            let factor = if is_symmetric(z) { z.clone().cholesky() } else { None };
            let x = match factor {
                Some(c) => c.solve(rhs),
                None => z.clone().lu().solve(rhs).unwrap_or_else(|| DVector::from_element(n, f64::NAN)),
            };
            report.iterations = 1;
            x
        }
        ConstraintLinearSolver::DenseCg => conjugate_gradient(z, rhs, None, max_iter, tol, &mut report),
        ConstraintLinearSolver::DensePcgJacobi => {
            conjugate_gradient(z, rhs, Some(&jacobi(z)), max_iter, tol, &mut report)
        }
        ConstraintLinearSolver::DenseCr => conjugate_residual(z, rhs, None, max_iter, tol, &mut report),
        ConstraintLinearSolver::DensePcrJacobi => {
            conjugate_residual(z, rhs, Some(&jacobi(z)), max_iter, tol, &mut report)
        }
    };
    let r = (rhs - z * &x).norm();
    report.final_residual = r;
    report.converged = r <= tol * bnorm;
    report.stagnated = !r.is_finite() || r > report.initial_residual;
    (x, report)
}

fn is_symmetric(z: &DMatrix<f64>) -> bool {
    let scale = z.amax();
    let n = z.nrows();
    (0..n).all(|i| (i + 1..n).all(|j| (z[(i, j)] - z[(j, i)]).abs() <= 1e-13 * scale))
}

fn jacobi(z: &DMatrix<f64>) -> DVector<f64> {
    z.diagonal().map(|d| if d != 0.0 { 1.0 / d } else { 1.0 })
}

fn precondition(m: Option<&DVector<f64>>, r: &DVector<f64>) -> DVector<f64> {
    match m {
        Some(d) => r.component_mul(d),
        None => r.clone(),
    }
}

fn conjugate_gradient(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    m: Option<&DVector<f64>>,
    max_iter: usize,
    tol: f64,
    report: &mut DenseSolveReport,
) -> DVector<f64> {
    let target = tol * b.norm();
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut best = (r.norm(), x.clone());
    let mut z = precondition(m, &r);
    let mut p = z.clone();
    let mut rz = r.dot(&z);
    for it in 0..max_iter {
        let ap = a * &p;
        let pap = p.dot(&ap);
        if pap == 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rz / pap;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        report.iterations = it + 1;
        let rn = r.norm();
        if rn < best.0 {
            best = (rn, x.clone());
        }
        if rn <= target {
            break;
        }
        z = precondition(m, &r);
        let rz_new = r.dot(&z);
        p = &z + &p * (rz_new / rz);
        rz = rz_new;
    }
    best.1
}

fn conjugate_residual(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    m: Option<&DVector<f64>>,
    max_iter: usize,
    tol: f64,
    report: &mut DenseSolveReport,
) -> DVector<f64> {
    let target = tol * b.norm();
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut best = (r.norm(), x.clone());
    let mut z = precondition(m, &r);
    let mut az = a * &z;
    let mut zaz = z.dot(&az);
    let mut p = z.clone();
    let mut ap = az.clone();
    for it in 0..max_iter {
        let q = precondition(m, &ap);
        let denom = ap.dot(&q);
        if denom == 0.0 || !denom.is_finite() {
            break;
        }
        let alpha = zaz / denom;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        z.axpy(-alpha, &q, 1.0);
        report.iterations = it + 1;
        let rn = r.norm();
        if rn < best.0 {
            best = (rn, x.clone());
        }
        if rn <= target {
            break;
        }
        az = a * &z;
        let zaz_new = z.dot(&az);
        let beta = zaz_new / zaz;
        p = &z + &p * beta;
        ap = &az + &ap * beta;
        zaz = zaz_new;
    }
    best.1
}
