use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot, norm2, pseudo_inverse, svd_full, Matrix, SvdResult};

/// Singular values below this fraction of the largest count as zero.
const RANK_TOL: f64 = 1e-10;

/// Shared direction plus an orthonormal language subspace fitted to per-language
/// mean embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsarBasis {
    /// `d × r`, orthonormal columns spanning the language-specific signal.
    pub m_s: Matrix,
    /// Language-agnostic component, orthogonal to every column of `m_s`.
    pub mu: Vec<f64>,
    /// `L × r` coordinates of each language in the subspace.
    pub gamma: Matrix,
    pub r: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    Agnostic,
    Specific,
}

fn top_r(m: &Matrix, r: usize, what: &str) -> Result<SvdResult> {
    let mut svd = svd_full(m)?;
    let smax = svd.s.first().copied().unwrap_or(0.0);
    if !(smax > 0.0) || svd.s[r - 1] <= RANK_TOL * smax {
        return Err(Error::numeric(format!(
            "{what} has rank below {r} (singular values {:?})",
            &svd.s
        )));
    }
    svd.s.truncate(r);
    svd.u = svd.u.slice(0, svd.u.rows(), 0, r);
    svd.v = svd.v.slice(0, svd.v.rows(), 0, r);
    Ok(svd)
}

/// `m − v·1ᵀ`.
fn subtract_from_columns(m: &Matrix, v: &[f64]) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| m[(i, j)] - v[i])
}

/// Fits the subspace to `means` (`d × L`, one column per language).
pub fn lsar_fit(means: &Matrix, r: usize) -> Result<LsarBasis> {
    let (d, l) = means.shape();
    if l < 2 {
        return Err(Error::arg(format!("need at least two languages, got {l}")));
    }
    // one direction of the fitted span is taken by the shared component
    let max_rank = (l - 1).min(d.saturating_sub(1));
    if r == 0 || r > max_rank {
        return Err(Error::arg(format!("rank {r} outside 1..={max_rank}")));
    }

    // low-rank approximation around the plain mean
    let mean: Vec<f64> = (0..d).map(|i| means.row(i).iter().sum::<f64>() / l as f64).collect();
    let first = top_r(&subtract_from_columns(means, &mean), r, "centered mean-embedding matrix")?;
    let mut approx = first.reconstruct();
    for i in 0..d {
        approx.row_mut(i).iter_mut().for_each(|v| *v += mean[i]);
    }

    // shared direction with μᵀ(M′ − μ1ᵀ) = 0
    let ones = vec![1.0; l];
    let dir = pseudo_inverse(&approx.transpose())?.matvec(&ones)?;
    let n2 = dot(&dir, &dir);
    if !(n2 > 0.0) || !n2.is_finite() {
        return Err(Error::numeric("shared direction vanished"));
    }
    let mu: Vec<f64> = dir.iter().map(|v| v / n2).collect();

    let mut centered = subtract_from_columns(&approx, &mu);
    // remove round-off leakage along μ
    let mu2 = dot(&mu, &mu);
    for j in 0..l {
        let col = centered.column(j);
        let a = dot(&col, &mu) / mu2;
        let fixed: Vec<f64> = col.iter().zip(&mu).map(|(c, m)| c - a * m).collect();
        centered.set_column(j, &fixed);
    }
    let second = top_r(&centered, r, "re-centered approximation")?;
    let gamma = Matrix::from_fn(l, r, |i, k| second.v[(i, k)] * second.s[k]);
    Ok(LsarBasis {
        m_s: second.u,
        mu,
        gamma,
        r,
    })
}

/// Splits `e` into its language-agnostic and language-specific parts.
pub fn lsar_split(e: &[f64], basis: &LsarBasis) -> Result<(Vec<f64>, Vec<f64>)> {
    if e.len() != basis.m_s.rows() {
        return Err(Error::arg(format!(
            "embedding has {} coordinates, basis expects {}",
            e.len(),
            basis.m_s.rows()
        )));
    }
    let coords = basis.m_s.matvec_t(e)?;
    let specific = basis.m_s.matvec(&coords)?;
    let agnostic = e.iter().zip(&specific).map(|(a, b)| a - b).collect();
    Ok((agnostic, specific))
}

/// Mean over samples of `‖component(full) − component(pruned)‖₂`.
pub fn delta_magnitude(
    full: &[Vec<f64>],
    pruned: &[Vec<f64>],
    basis: &LsarBasis,
    component: Component,
) -> Result<f64> {
    if full.len() != pruned.len() {
        return Err(Error::arg(format!(
            "sample counts differ: {} vs {}",
            full.len(),
            pruned.len()
        )));
    }
    if full.is_empty() {
        return Err(Error::arg("no samples"));
    }
    let mut total = 0.0;
    for (a, b) in full.iter().zip(pruned) {
        let (aa, asp) = lsar_split(a, basis)?;
        let (ba, bsp) = lsar_split(b, basis)?;
        let (x, y) = match component {
            Component::Agnostic => (aa, ba),
            Component::Specific => (asp, bsp),
        };
        let diff: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p - q).collect();
        total += norm2(&diff);
    }
    Ok(total / full.len() as f64)
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

    fn check_invariants(b: &LsarBasis) {
        let gram = b.m_s.transpose().matmul(&b.m_s).unwrap();
        assert!(gram.max_abs_diff(&Matrix::identity(b.r)).unwrap() <= 1e-8);
        let proj = b.m_s.matvec_t(&b.mu).unwrap();
        let lim = 1e-8 * norm2(&b.mu);
        assert!(proj.iter().all(|v| v.abs() <= lim), "{proj:?}");
    }

    #[test]
    fn identical_columns_are_degenerate() {
        let m = Matrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]]).unwrap();
        assert!(matches!(lsar_fit(&m, 1), Err(Error::Numeric(_))));
    }

    #[test]
    fn rank_bounds() {
        let m = random(5, 4, 1);
        assert!(matches!(lsar_fit(&m, 0), Err(Error::Argument(_))));
        assert!(matches!(lsar_fit(&m, 4), Err(Error::Argument(_))));
        assert!(matches!(lsar_fit(&random(5, 1, 1), 1), Err(Error::Argument(_))));
        lsar_fit(&m, 3).unwrap();
    }

    #[test]
    fn symmetric_pair_recovers_directions() {
        // columns μ₀ ± v with v ⊥ μ₀
        let mu0 = [1.0, 2.0, 0.0, -1.0];
        let v = [2.0, -1.0, 0.5, 0.0];
        assert_eq!(dot(&mu0, &v), 0.0);
        let m = Matrix::from_fn(4, 2, |i, j| if j == 0 { mu0[i] + v[i] } else { mu0[i] - v[i] });
        let b = lsar_fit(&m, 1).unwrap();
        check_invariants(&b);
        let s = b.m_s.column(0);
        let along = dot(&s, &v) / norm2(&v);
        let resid: Vec<f64> = v.iter().zip(&s).map(|(x, y)| x / norm2(&v) - along * y).collect();
        assert!(norm2(&resid) < 1e-8);
        let cos = dot(&b.mu, &mu0) / (norm2(&b.mu) * norm2(&mu0));
        assert!((cos.abs() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn random_fit_invariants_and_reconstruction_band() {
        for s in 0..10 {
            let m = random(16, 6, 40 + s);
            let b = lsar_fit(&m, 4).unwrap();
            check_invariants(&b);
            let model = Matrix::from_fn(16, 6, |i, j| {
                b.mu[i] + (0..4).map(|k| b.m_s[(i, k)] * b.gamma[(j, k)]).sum::<f64>()
            });
            let err = m.sub(&model).unwrap().frobenius_norm();
            // the fit has rank ≤ r + 1, and reproduces the centered rank-r approximation
            let full = svd_full(&m).unwrap();
            let lower: f64 = full.s[5..].iter().map(|v| v * v).sum::<f64>().sqrt();
            let mean: Vec<f64> = (0..16).map(|i| m.row(i).iter().sum::<f64>() / 6.0).collect();
            let cs = svd_full(&subtract_from_columns(&m, &mean)).unwrap();
            let upper: f64 = cs.s[4..].iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err >= lower - 1e-10 && err <= upper + 1e-10, "{lower} {err} {upper}");
        }
    }

    #[test]
    fn split_properties() {
        let b = lsar_fit(&random(8, 4, 3), 3).unwrap();
        let inside = b.m_s.matvec(&[0.3, -1.0, 2.0]).unwrap();
        let (a, _) = lsar_split(&inside, &b).unwrap();
        assert!(a.iter().all(|v| v.abs() < 1e-12));
        let (_, sp) = lsar_split(&b.mu, &b).unwrap();
        assert!(norm2(&sp) <= 1e-8 * norm2(&b.mu));
        let e: Vec<f64> = (0..8).map(|i| (i as f64).sin()).collect();
        let (a, sp) = lsar_split(&e, &b).unwrap();
        for i in 0..8 {
            assert!((a[i] + sp[i] - e[i]).abs() <= 1e-15);
        }
        let (_, sp2) = lsar_split(&sp, &b).unwrap();
        assert!(sp.iter().zip(&sp2).all(|(x, y)| (x - y).abs() < 1e-10));
        assert!(lsar_split(&[1.0; 3], &b).is_err());
    }

    #[test]
    fn delta_along_constructed_perturbations() {
        let b = lsar_fit(&random(8, 4, 5), 3).unwrap();
        let full: Vec<Vec<f64>> = (0..3).map(|s| random(8, 1, 60 + s).into_vec()).collect();
        assert_eq!(delta_magnitude(&full, &full, &b, Component::Specific).unwrap(), 0.0);
        let delta = 0.7;
        let col = b.m_s.column(1);
        let shifted: Vec<Vec<f64>> = full
            .iter()
            .map(|e| e.iter().zip(&col).map(|(x, c)| x + delta * c).collect())
            .collect();
        assert!((delta_magnitude(&full, &shifted, &b, Component::Specific).unwrap() - delta).abs() < 1e-12);
        assert!(delta_magnitude(&full, &shifted, &b, Component::Agnostic).unwrap() < 1e-12);

        // a direction orthogonal to both the subspace and μ
        let mut w: Vec<f64> = (0..8).map(|i| ((i * 3 + 1) % 5) as f64 - 2.0).collect();
        let mut basis: Vec<Vec<f64>> = (0..3).map(|k| b.m_s.column(k)).collect();
        basis.push(b.mu.iter().map(|v| v / norm2(&b.mu)).collect());
        for q in &basis {
            let a = dot(&w, q);
            w.iter_mut().zip(q).for_each(|(x, y)| *x -= a * y);
        }
        let n = norm2(&w);
        let shifted: Vec<Vec<f64>> = full
            .iter()
            .map(|e| e.iter().zip(&w).map(|(x, c)| x + delta * c / n).collect())
            .collect();
        assert!((delta_magnitude(&full, &shifted, &b, Component::Agnostic).unwrap() - delta).abs() < 1e-12);
        assert!(delta_magnitude(&full, &shifted, &b, Component::Specific).unwrap() < 1e-12);
        assert!(delta_magnitude(&full, &full[..2], &b, Component::Agnostic).is_err());
    }
}
