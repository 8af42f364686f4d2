//! One-sided Jacobi SVD.
//!
//! Columns of a working copy are rotated pairwise until they are mutually
//! orthogonal; the column norms are then the singular values. Accurate to
//! roughly machine precision in the relative sense, which the analysis code
//! needs for its orthogonality invariants.

use serde::{Deserialize, Serialize};

use super::matrix::{dot, Matrix};
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
/// Pairs whose normalised inner product is below this count as orthogonal.
const REL_TOL: f64 = 1e-15;
/// Absolute off-diagonal floor, as a fraction of the input's Frobenius norm.
const ABS_TOL: f64 = 1e-12;

/// Thin SVD `m ≈ u · diag(s) · vᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvdResult {
    /// Left singular vectors as columns (rows(m) × r).
    pub u: Matrix,
    /// Singular values, descending.
    pub s: Vec<f64>,
    /// Right singular vectors as columns (cols(m) × r).
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    /// `u · diag(s) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let us = Matrix::from_fn(self.u.rows(), self.s.len(), |r, c| self.u[(r, c)] * self.s[c]);
        us.matmul_transb(&self.v).expect("consistent SVD factors")
    }
}

/// Top-`r` singular triplets of `m`, with each left singular vector's
/// largest-magnitude entry made positive.
pub fn svd_top_r(m: &Matrix, r: usize) -> Result<SvdResult> {
    let k = m.rows().min(m.cols());
    if r == 0 || r > k {
        return Err(Error::arg(format!(
            "rank {r} outside 1..={k} for a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    let mut full = svd_full(m)?;
    full.s.truncate(r);
    full.u = full.u.slice(0, full.u.rows(), 0, r);
    full.v = full.v.slice(0, full.v.rows(), 0, r);
    Ok(full)
}

/// Thin SVD with `min(rows, cols)` components.
pub fn svd_full(m: &Matrix) -> Result<SvdResult> {
    let (u, s, v) = if m.rows() >= m.cols() {
        jacobi_tall(m)?
    } else {
        let (u, s, v) = jacobi_tall(&m.transpose())?;
        (v, s, u)
    };
    let mut out = SvdResult { u, s, v };
    fix_signs(&mut out);
    Ok(out)
}

/// Jacobi on a matrix with rows ≥ cols. Returns factors sorted by descending
/// singular value.
fn jacobi_tall(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| m.column(c)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|c| {
            let mut e = vec![0.0; n];
            e[c] = 1.0;
            e
        })
        .collect();
    let abs_floor = (ABS_TOL * m.frobenius_norm()).powi(2);

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= abs_floor || gamma.abs() <= REL_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numeric(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms.iter().copied().fold(0.0, f64::max);
    let null_tol = smax * (rows.max(n) as f64) * f64::EPSILON;
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending_null = 0;
    for &j in &order {
        if norms[j] > null_tol && norms[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / norms[j]).collect());
        } else {
            pending_null += 1;
        }
    }
    complete_basis(&mut ucols, rows, pending_null);

    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Matrix::from_fn(rows, n, |r, c| ucols[c][r]);
    let v = Matrix::from_fn(n, n, |r, c| vcols[order[c]][r]);
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (a, b) = (&mut lo[p], &mut hi[0]);
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Appends `extra` unit vectors orthogonal to `basis`, drawn from the
/// standard basis by twice-iterated Gram-Schmidt.
fn complete_basis(basis: &mut Vec<Vec<f64>>, dim: usize, extra: usize) {
    let mut added = 0;
    let mut e = 0;
    while added < extra && e < dim {
        let mut cand = vec![0.0; dim];
        cand[e] = 1.0;
        e += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&cand, b);
                cand.iter_mut().zip(b).for_each(|(c, bv)| *c -= proj * bv);
            }
        }
        let n = dot(&cand, &cand).sqrt();
        if n > 1e-8 {
            cand.iter_mut().for_each(|c| *c /= n);
            basis.push(cand);
            added += 1;
        }
    }
}

fn fix_signs(svd: &mut SvdResult) {
    for c in 0..svd.s.len() {
        let col = svd.u.column(c);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for r in 0..svd.u.rows() {
                svd.u[(r, c)] = -svd.u[(r, c)];
            }
            for r in 0..svd.v.rows() {
                svd.v[(r, c)] = -svd.v[(r, c)];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn random(rows: usize, cols: usize, s: u64) -> Matrix {
        let mut rng = seed::rng(s);
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q).unwrap();
        g.max_abs_diff(&Matrix::identity(q.cols())).unwrap()
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let svd = svd_top_r(&m, 2).unwrap();
        assert_eq!(svd.s, vec![3.0, 2.0]);
        let expect = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(svd.u, expect);
        assert_eq!(svd.v, expect);
    }

    #[test]
    fn identity_rank_one() {
        let svd = svd_top_r(&Matrix::identity(4), 1).unwrap();
        assert_eq!(svd.s, vec![1.0]);
    }

    #[test]
    fn full_rank_reconstruction() {
        let m = random(6, 4, 3);
        let svd = svd_top_r(&m, 4).unwrap();
        let resid = svd.reconstruct().sub(&m).unwrap().frobenius_norm();
        assert!(resid <= 1e-9 * m.frobenius_norm(), "residual {resid}");
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(orthonormality_error(&svd.v) < 1e-10);
    }

    #[test]
    fn wide_matrix_uses_transpose() {
        let m = random(3, 7, 9);
        let svd = svd_full(&m).unwrap();
        assert_eq!(svd.u.shape(), (3, 3));
        assert_eq!(svd.v.shape(), (7, 3));
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);
    }

    #[test]
    fn rank_deficient_gets_orthonormal_completion() {
        // rank one: outer product
        let m = Matrix::from_fn(5, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 0.5));
        let svd = svd_full(&m).unwrap();
        assert!(svd.s[1] < 1e-12 && svd.s[2] < 1e-12);
        assert!(orthonormality_error(&svd.u) < 1e-10);
        assert!(svd.reconstruct().max_abs_diff(&m).unwrap() < 1e-12);
        let z = svd_full(&Matrix::zeros(3, 2)).unwrap();
        assert!(orthonormality_error(&z.u) < 1e-12);
    }

    #[test]
    fn rank_bounds() {
        let m = random(4, 3, 1);
        assert!(matches!(svd_top_r(&m, 0), Err(Error::Argument(_))));
        assert!(matches!(svd_top_r(&m, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn sign_convention_and_ordering() {
        let m = random(8, 5, 17);
        let svd = svd_full(&m).unwrap();
        assert!(svd.s.windows(2).all(|w| w[0] >= w[1]));
        for c in 0..5 {
            let col = svd.u.column(c);
            let big = col.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            assert!(big > 0.0);
        }
    }

    #[test]
    fn deterministic_and_monotone_truncation() {
        let m = random(7, 5, 5);
        assert_eq!(svd_full(&m).unwrap(), svd_full(&m).unwrap());
        let errs: Vec<f64> = (1..=5)
            .map(|r| {
                svd_top_r(&m, r)
                    .unwrap()
                    .reconstruct()
                    .sub(&m)
                    .unwrap()
                    .frobenius_norm()
            })
            .collect();
        assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-12), "{errs:?}");
    }
}
