//! One-sided (Hestenes) Jacobi SVD and a cyclic Jacobi symmetric eigensolver.
//!
//! Both are reference routines: accurate to near machine precision at the
//! sizes used here (a few hundred rows), and slow beyond that.

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

pub const MAX_JACOBI_SWEEPS: usize = 64;

/// Thin SVD `m = U · diag(s) · Vᵀ` with `k = min(rows, cols)` singular triplets.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// Descending, non-negative.
    pub singular_values: Vec<f64>,
    /// `rows × k`, orthonormal columns.
    pub left_vectors: Matrix,
    /// `cols × k`, orthonormal columns.
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn sigma_max(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    pub fn reconstruct(&self) -> Matrix {
        let (m, k) = self.left_vectors.shape();
        let mut us = self.left_vectors.clone();
        for i in 0..m {
            for j in 0..k {
                us[(i, j)] *= self.singular_values[j];
            }
        }
        us.matmul_nt(&self.right_vectors)
            .expect("svd factors have consistent shapes")
    }
}

pub fn svd(m: &Matrix) -> Result<SvdResult> {
    if m.is_empty() {
        return Err(Error::Domain("svd of an empty matrix".into()));
    }
    if !m.is_finite() {
        return Err(Error::Numerical("svd input has non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        one_sided_jacobi(m)
    } else {
        let t = one_sided_jacobi(&m.transpose())?;
        Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        })
    }
}

/// Largest singular value via the full SVD.
pub fn sigma_svd(m: &Matrix) -> Result<f64> {
    Ok(svd(m)?.sigma_max())
}

// Requires rows >= cols. Works on columns stored contiguously.
fn one_sided_jacobi(m: &Matrix) -> Result<SvdResult> {
    let (rows, n) = m.shape();
    let at = m.transpose();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| at.row(j).to_vec()).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let eps = 1e-15;
    // columns this small are rounding noise of a rank-deficient input
    let negligible = (f64::EPSILON * m.frobenius_norm()).powi(2);
    let mut converged = n < 2;
    for _sweep in 0..MAX_JACOBI_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0
                    || alpha <= negligible
                    || beta <= negligible
                    || gamma.abs() <= eps * (alpha * beta).sqrt()
                {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut cols, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerical(format!(
            "one-sided Jacobi SVD did not converge in {MAX_JACOBI_SWEEPS} sweeps"
        )));
    }

    let mut order: Vec<(usize, f64)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (j, dot(c, c).sqrt()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1));

    let scale = order.first().map_or(0.0, |o| o.1);
    let mut singular_values = Vec::with_capacity(n);
    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut missing = Vec::new();
    for (slot, &(j, s)) in order.iter().enumerate() {
        singular_values.push(s);
        v_cols.push(v[j].clone());
        if s > 0.0 && s > scale * 1e-15 {
            u_cols.push(cols[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            missing.push(slot);
        }
    }
    complete_orthonormal(&mut u_cols, &missing);

    let mut left = Matrix::zeros(rows, n);
    let mut right = Matrix::zeros(n, n);
    for k in 0..n {
        for i in 0..rows {
            left[(i, k)] = u_cols[k][i];
        }
        for i in 0..n {
            right[(i, k)] = v_cols[k][i];
        }
    }
    Ok(SvdResult {
        singular_values,
        left_vectors: left,
        right_vectors: right,
    })
}

fn rotate_pair(vecs: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = vecs.split_at_mut(q);
    let a = &mut lo[p];
    let b = &mut hi[0];
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

// Fills the listed (zero) columns with unit vectors orthogonal to all others,
// using Gram-Schmidt over the standard basis.
fn complete_orthonormal(cols: &mut [Vec<f64>], missing: &[usize]) {
    if missing.is_empty() {
        return;
    }
    let dim = cols[0].len();
    let mut candidate = 0;
    for &slot in missing {
        while candidate < dim {
            let mut e = vec![0.0; dim];
            e[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (ei, ci) in e.iter_mut().zip(c) {
                        *ei -= proj * ci;
                    }
                }
            }
            let n = dot(&e, &e).sqrt();
            if n > 1e-8 {
                cols[slot] = e.iter().map(|x| x / n).collect();
                break;
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymmetricEigen {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Column `k` is the unit eigenvector for `eigenvalues[k]`.
    pub eigenvectors: Matrix,
}

/// Cyclic two-sided Jacobi eigensolver for symmetric matrices.
pub fn symmetric_eigen(a: &Matrix) -> Result<SymmetricEigen> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::shape("symmetric_eigen", format!("{:?}", a.shape())));
    }
    if n == 0 {
        return Err(Error::Domain(
            "eigen-decomposition of an empty matrix".into(),
        ));
    }
    let mut m = a.clone();
    // callers often build the input with round-off asymmetry
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
    let mut v = Matrix::identity(n);
    let total = m.frobenius_norm();
    let mut converged = false;
    for _sweep in 0..(2 * MAX_JACOBI_SWEEPS) {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-14 * total || off == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        return Err(Error::Numerical(
            "Jacobi eigensolver did not converge".into(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]));
    let eigenvalues = order.iter().map(|&i| m[(i, i)]).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        for i in 0..n {
            eigenvectors[(i, k)] = v[(i, src)];
        }
    }
    Ok(SymmetricEigen {
        eigenvalues,
        eigenvectors,
    })
}
