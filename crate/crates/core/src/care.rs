//! Continuous algebraic Riccati equation via the matrix sign function of the
//! Hamiltonian, refined with Kleinman-Newton iterations.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::Svd;

/// Closed loops must have every eigenvalue real part below this.
pub const HURWITZ_MARGIN: f64 = -1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CareError {
    #[error("pair is not stabilizable: {0}")]
    NotStabilizable(String),
    #[error("stable invariant subspace is ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    /// Max-abs residual of the Riccati equation at `p`.
    pub residual: f64,
    /// Largest real part of the closed-loop spectrum.
    pub max_real_eig: f64,
}

pub fn care_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r_inv: &DMatrix<f64>, p: &DMatrix<f64>) -> f64 {
    let res = a.transpose() * p + p * a - p * b * r_inv * b.transpose() * p + q;
    res.amax()
}

pub fn max_real_eigenvalue(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
}

/// Solves `A^T X + X A = -C` through the Kronecker-vectorized system.
pub fn lyapunov(a: &DMatrix<f64>, c: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let at = a.transpose();
    let big = id.kronecker(&at) + at.kronecker(&id);
    let rhs = -DMatrix::from_column_slice(n * n, 1, c.as_slice());
    let x = big.lu().solve(&rhs)?;
    let x = DMatrix::from_column_slice(n, n, x.as_slice());
    Some((&x + x.transpose()) * 0.5)
}

fn sign_function(h: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n2 = h.nrows();
    let mut z = h.clone();
    for _ in 0..100 {
        let lu = z.clone().lu();
        let det = lu.determinant();
        if !det.is_finite() || det == 0.0 {
            return None;
        }
        let inv = lu.try_inverse()?;
        let c = det.abs().powf(-1.0 / n2 as f64);
        let next = (&z * c + inv / c) * 0.5;
        let delta = (&next - &z).abs().row_sum().max();
        let scale = next.abs().row_sum().max();
        z = next;
        if delta <= 1e-13 * scale {
            return Some(z);
        }
    }
    let zz = &z * &z - DMatrix::identity(n2, n2);
    (zz.amax() < 1e-8).then_some(z)
}

pub fn solve_care(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<CareSolution, CareError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.shape() != (n, n) || r.nrows() != b.ncols() || !r.is_square() {
        return Err(CareError::Dimension(format!(
            "A {:?}, B {:?}, Q {:?}, R {:?}",
            a.shape(),
            b.shape(),
            q.shape(),
            r.shape()
        )));
    }
    let r_inv = r
        .clone()
        .cholesky()
        .ok_or_else(|| CareError::Dimension("R is not positive definite".into()))?
        .inverse();
    let g = b * &r_inv * b.transpose();

    let mut h = DMatrix::zeros(2 * n, 2 * n);
    h.view_mut((0, 0), (n, n)).copy_from(a);
    h.view_mut((0, n), (n, n)).copy_from(&(-&g));
    h.view_mut((n, 0), (n, n)).copy_from(&(-q));
    h.view_mut((n, n), (n, n)).copy_from(&(-a.transpose()));

    let w = sign_function(&h)
        .ok_or_else(|| CareError::NotStabilizable("Hamiltonian has eigenvalues on the imaginary axis".into()))?;
    let id = DMatrix::<f64>::identity(n, n);
    let mut lhs = DMatrix::zeros(2 * n, n);
    lhs.view_mut((0, 0), (n, n)).copy_from(&w.view((0, n), (n, n)));
    lhs.view_mut((n, 0), (n, n)).copy_from(&(w.view((n, n), (n, n)) + &id));
    let mut rhs = DMatrix::zeros(2 * n, n);
    rhs.view_mut((0, 0), (n, n)).copy_from(&(-(w.view((0, 0), (n, n)) + &id)));
    rhs.view_mut((n, 0), (n, n)).copy_from(&(-w.view((n, 0), (n, n))));

    let svd = Svd::new(&lhs);
    let tol = svd.max() * 1e-12 * (2 * n) as f64;
    if svd.rank(tol) < n {
        return Err(CareError::IllConditioned(format!(
            "subspace basis has rank {} of {n}",
            svd.rank(tol)
        )));
    }
    let pinv = svd.pseudo_inverse(tol);
    let p = pinv * rhs;
    let mut p = (&p + p.transpose()) * 0.5;
    let mut residual = care_residual(a, b, q, &r_inv, &p);

    for _ in 0..8 {
        if residual < 1e-13 * (1.0 + p.amax()) {
            break;
        }
        let k = &r_inv * b.transpose() * &p;
        let ak = a - b * &k;
        let qk = q + k.transpose() * r * &k;
        let Some(next) = lyapunov(&ak, &qk) else { break };
        let next_res = care_residual(a, b, q, &r_inv, &next);
        if !(next_res < residual) {
            break;
        }
        p = next;
        residual = next_res;
    }

    let k = &r_inv * b.transpose() * &p;
    let max_real_eig = max_real_eigenvalue(&(a - b * &k));
    if !(max_real_eig < HURWITZ_MARGIN) {
        return Err(CareError::NotStabilizable(format!(
            "closed loop has an eigenvalue with real part {max_real_eig:e}"
        )));
    }
    Ok(CareSolution {
        p,
        k,
        residual,
        max_real_eig,
    })
}
