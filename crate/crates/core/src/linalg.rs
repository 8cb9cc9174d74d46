//! Dense helpers: a one-sided Jacobi SVD, which stays accurate on the exactly
//! rank-deficient matrices that allocation and rigidity checks produce.

use nalgebra::{DMatrix, DVector};

/// Thin SVD `A = U diag(s) V^T` with singular values in decreasing order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn new(a: &DMatrix<f64>) -> Svd {
        if a.nrows() < a.ncols() {
            let t = jacobi(a.transpose());
            return Svd { u: t.v, s: t.s, v: t.u };
        }
        jacobi(a.clone())
    }

    pub fn max(&self) -> f64 {
        self.s.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.s.iter().filter(|x| **x > tol).count()
    }

    /// Minimum-norm least-squares solution, discarding singular values `<= tol`.
    pub fn solve(&self, b: &DVector<f64>, tol: f64) -> DVector<f64> {
        let mut y = self.u.tr_mul(b);
        for (k, s) in self.s.iter().enumerate() {
            y[k] = if *s > tol { y[k] / s } else { 0.0 };
        }
        &self.v * y
    }

    pub fn pseudo_inverse(&self, tol: f64) -> DMatrix<f64> {
        let mut vs = self.v.clone();
        for (k, s) in self.s.iter().enumerate() {
            let w = if *s > tol { 1.0 / s } else { 0.0 };
            vs.column_mut(k).scale_mut(w);
        }
        vs * self.u.transpose()
    }
}

fn jacobi(mut u: DMatrix<f64>) -> Svd {
    let (m, n) = u.shape();
    let mut v = DMatrix::<f64>::identity(n, n);
    for _sweep in 0..80 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (u[(i, p)], u[(i, q)]);
                    u[(i, p)] = c * x - s * y;
                    u[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let norms: Vec<f64> = (0..n).map(|k| u.column(k).norm()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| norms[*b].total_cmp(&norms[*a]));
    let mut uu = DMatrix::zeros(m, n);
    let mut vv = DMatrix::zeros(n, n);
    let mut s = DVector::zeros(n);
    for (k, &j) in order.iter().enumerate() {
        s[k] = norms[j];
        if norms[j] > 0.0 {
            uu.set_column(k, &(u.column(j) / norms[j]));
        }
        vv.set_column(k, &v.column(j));
    }
    Svd { u: uu, s, v: vv }
}
