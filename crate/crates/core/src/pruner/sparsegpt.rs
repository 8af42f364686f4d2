use super::select::{smallest_in_block, smallest_in_segment};
use super::{ComparisonGroup, KeepMatrix, Provenance, PruningMask, SparsityPattern, SparsitySpec};
use crate::error::{Error, Result};
use crate::numerics::{cholesky, cholesky_inverse, Matrix};
use crate::par;

/// Prunes `w` (`out × in`) against calibration inputs `x` (`in × tokens`),
/// compensating the removed weights through the inverse input Hessian.
///
/// Returns the mask and the updated weights; dropped entries are exactly zero.
pub fn prune_sparsegpt(
    w: &Matrix,
    x: &Matrix,
    spec: &SparsitySpec,
    damping_frac: f64,
    block_size: usize,
) -> Result<(PruningMask, Matrix)> {
    if x.rows() != w.cols() {
        return Err(Error::arg(format!(
            "input features {} do not match weight columns {}",
            x.rows(),
            w.cols()
        )));
    }
    let gram = x.matmul_transb(x)?;
    sparsegpt_from_gram(w, &gram, spec, damping_frac, block_size)
}

/// Same as [`prune_sparsegpt`] with the Gram matrix `X·Xᵀ` already formed.
pub(crate) fn sparsegpt_from_gram(
    w: &Matrix,
    gram: &Matrix,
    spec: &SparsitySpec,
    damping_frac: f64,
    block_size: usize,
) -> Result<(PruningMask, Matrix)> {
    let (rows, cols) = w.shape();
    spec.validate_for(rows, cols)?;
    if gram.shape() != (cols, cols) {
        return Err(Error::arg(format!(
            "Hessian shape {:?} does not match {cols} weight columns",
            gram.shape()
        )));
    }
    if !(damping_frac >= 0.0) || !damping_frac.is_finite() {
        return Err(Error::arg(format!("damping_frac must be ≥ 0, got {damping_frac}")));
    }
    if block_size == 0 {
        return Err(Error::arg("block_size must be at least 1"));
    }

    let diag = gram.diag();
    let lambda = damping_frac * diag.iter().sum::<f64>() / cols as f64;
    let hinv = cholesky_inverse(gram, lambda)
        .map_err(|e| Error::numeric(format!("damped Hessian is singular: {e}")))?;
    // upper factor with H⁻¹ = Uᵀ·U; U[c][c]² is the inverse-Hessian diagonal
    // conditioned on the columns already processed
    let u = cholesky(&hinv)?.transpose();
    let ucc: Vec<f64> = u.diag();
    let saliency = |v: f64, c: usize| v * v / (ucc[c] * ucc[c]);

    let mut out = w.clone();
    let mut keep = KeepMatrix::all(rows, cols, true);

    let mut i1 = 0;
    while i1 < cols {
        let i2 = (i1 + block_size).min(cols);
        let width = i2 - i1;

        // each block drops the entries of its columns that rank among the
        // cheapest still owed by the row (or matrix) over all remaining columns
        match spec.pattern {
            SparsityPattern::Unstructured { .. } => match spec.group {
                ComparisonGroup::PerRow => {
                    let quota = spec.zeros_per_group(cols);
                    let drops = par::map_range(rows, |r| {
                        let owed = quota - keep.row(r)[..i1].iter().filter(|&&k| !k).count();
                        let s: Vec<f64> = (i1..cols).map(|c| saliency(out[(r, c)], c)).collect();
                        smallest_in_segment(&s, owed)
                            .into_iter()
                            .filter(|&c| c < width)
                            .collect::<Vec<_>>()
                    });
                    for (r, cs) in drops.into_iter().enumerate() {
                        cs.into_iter().for_each(|c| keep.set(r, i1 + c, false));
                    }
                }
                ComparisonGroup::WholeMatrix => {
                    let owed = spec.zeros_per_group(rows * cols) - keep.dropped();
                    let picked = smallest_in_block(
                        |r, c| saliency(out[(r, i1 + c)], i1 + c),
                        rows,
                        cols - i1,
                        owed,
                    );
                    for (r, c) in picked.into_iter().filter(|&(_, c)| c < width) {
                        keep.set(r, i1 + c, false);
                    }
                }
            },
            SparsityPattern::NofM { .. } => {}
        }

        let block_keep: Vec<Vec<bool>> = (0..rows).map(|r| keep.row(r).to_vec()).collect();
        let results = par::map_range(rows, |r| {
            let mut row = out.row(r).to_vec();
            let mut row_keep = block_keep[r].clone();
            for c in i1..i2 {
                if let SparsityPattern::NofM { n, m } = spec.pattern {
                    if c % m == 0 {
                        let s: Vec<f64> = (c..c + m).map(|j| saliency(row[j], j)).collect();
                        for j in smallest_in_segment(&s, m - n) {
                            row_keep[c + j] = false;
                        }
                    }
                }
                if row_keep[c] {
                    continue;
                }
                let err = row[c] / ucc[c];
                if err != 0.0 {
                    let urow = u.row(c);
                    for j in c + 1..cols {
                        row[j] -= err * urow[j];
                    }
                }
                row[c] = 0.0;
            }
            (row, row_keep)
        });
        for (r, (row, row_keep)) in results.into_iter().enumerate() {
            out.row_mut(r).copy_from_slice(&row);
            for (c, k) in row_keep.into_iter().enumerate() {
                keep.set(r, c, k);
            }
        }
        i1 = i2;
    }

    let mask = PruningMask {
        keep,
        spec: *spec,
        provenance: Provenance::default(),
    };
    Ok((mask, out))
}
