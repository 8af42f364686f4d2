use super::matrix::Matrix;
use super::svd::svd_full;
use crate::error::{Error, Result};

fn check_symmetric(h: &Matrix) -> Result<()> {
    if !h.is_square() {
        return Err(Error::arg(format!(
            "expected a square matrix, got {}x{}",
            h.rows(),
            h.cols()
        )));
    }
    let tol = 1e-12 * h.max_abs().max(1.0);
    for r in 0..h.rows() {
        for c in r + 1..h.cols() {
            if (h[(r, c)] - h[(c, r)]).abs() > tol {
                return Err(Error::arg(format!("matrix not symmetric at ({r}, {c})")));
            }
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `h = L·Lᵀ`.
pub fn cholesky(h: &Matrix) -> Result<Matrix> {
    check_symmetric(h)?;
    let n = h.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = h[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::numeric(format!(
                "matrix not positive definite: pivot {j} is {d:e}"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = h[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by forward substitution.
fn lower_inverse(l: &Matrix) -> Matrix {
    let n = l.rows();
    let mut inv = Matrix::zeros(n, n);
    for col in 0..n {
        inv[(col, col)] = 1.0 / l[(col, col)];
        for i in col + 1..n {
            let mut s = 0.0;
            for k in col..i {
                s += l[(i, k)] * inv[(k, col)];
            }
            inv[(i, col)] = -s / l[(i, i)];
        }
    }
    inv
}

/// `(h + damping·I)⁻¹` through a Cholesky factorisation. The result is exactly
/// symmetric.
pub fn cholesky_inverse(h: &Matrix, damping: f64) -> Result<Matrix> {
    if !(damping >= 0.0) || !damping.is_finite() {
        return Err(Error::arg(format!("damping must be finite and ≥ 0, got {damping}")));
    }
    check_symmetric(h)?;
    let mut damped = h.clone();
    for i in 0..h.rows() {
        damped[(i, i)] += damping;
    }
    let linv = lower_inverse(&cholesky(&damped)?);
    // (L Lᵀ)⁻¹ = L⁻ᵀ L⁻¹
    let mut inv = linv.transpose().matmul(&linv)?;
    let n = inv.rows();
    for r in 0..n {
        for c in r + 1..n {
            let avg = 0.5 * (inv[(r, c)] + inv[(c, r)]);
            inv[(r, c)] = avg;
            inv[(c, r)] = avg;
        }
    }
    Ok(inv)
}

/// Moore-Penrose pseudo-inverse via the thin SVD. Singular values below
/// `max(rows, cols)·ε·σ_max` are treated as zero.
pub fn pseudo_inverse(m: &Matrix) -> Result<Matrix> {
    if m.as_slice().iter().all(|&v| v == 0.0) {
        return Err(Error::arg("pseudo-inverse of an all-zero matrix"));
    }
    let svd = svd_full(m)?;
    let smax = svd.s[0];
    let tol = smax * (m.rows().max(m.cols()) as f64) * f64::EPSILON;
    let mut out = Matrix::zeros(m.cols(), m.rows());
    for (k, &s) in svd.s.iter().enumerate() {
        if s <= tol {
            continue;
        }
        for i in 0..m.cols() {
            let vi = svd.v[(i, k)] / s;
            for j in 0..m.rows() {
                out[(i, j)] += vi * svd.u[(j, k)];
            }
        }
    }
    Ok(out)
}
