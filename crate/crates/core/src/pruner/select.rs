use std::cmp::Ordering;

use super::{ComparisonGroup, KeepMatrix, SparsityPattern, SparsitySpec};
use crate::error::Result;
use crate::numerics::Matrix;
use crate::par;

/// Ascending by score, then by column; the first `k` are the ones to drop.
#[inline]
fn by_score_then_col(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b))
}

/// Local indices of the `k` lowest-scoring entries of a row segment.
pub(crate) fn smallest_in_segment(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Vec::new();
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_score_then_col(scores));
        idx.truncate(k);
    }
    idx
}

/// `(row, col)` pairs of the `k` lowest scores of a `rows × width` block,
/// ordered by score, then column, then row.
pub(crate) fn smallest_in_block(
    scores: impl Fn(usize, usize) -> f64,
    rows: usize,
    width: usize,
    k: usize,
) -> Vec<(usize, usize)> {
    let mut all: Vec<(f64, usize, usize)> = (0..rows)
        .flat_map(|r| (0..width).map(move |c| (r, c)))
        .map(|(r, c)| (scores(r, c), c, r))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    all.truncate(k);
    all.into_iter().map(|(_, c, r)| (r, c)).collect()
}

/// Keep flags dropping the lowest `scores` per comparison group of `spec`.
pub fn select_mask(scores: &Matrix, spec: &SparsitySpec) -> Result<KeepMatrix> {
    let (rows, cols) = scores.shape();
    spec.validate_for(rows, cols)?;
    let mut keep = KeepMatrix::all(rows, cols, true);
    match (spec.pattern, spec.group) {
        (SparsityPattern::Unstructured { .. }, ComparisonGroup::WholeMatrix) => {
            let k = spec.zeros_per_group(rows * cols);
            for (r, c) in smallest_in_block(|r, c| scores[(r, c)], rows, cols, k) {
                keep.set(r, c, false);
            }
        }
        (SparsityPattern::Unstructured { .. }, ComparisonGroup::PerRow) => {
            let k = spec.zeros_per_group(cols);
            let drops = par::map_range(rows, |r| smallest_in_segment(scores.row(r), k));
            for (r, cs) in drops.into_iter().enumerate() {
                cs.into_iter().for_each(|c| keep.set(r, c, false));
            }
        }
        (SparsityPattern::NofM { n, m }, _) => {
            let drops = par::map_range(rows, |r| {
                let row = scores.row(r);
                (0..cols)
                    .step_by(m)
                    .flat_map(|g| {
                        smallest_in_segment(&row[g..g + m], m - n)
                            .into_iter()
                            .map(move |c| g + c)
                    })
                    .collect::<Vec<_>>()
            });
            for (r, cs) in drops.into_iter().enumerate() {
                cs.into_iter().for_each(|c| keep.set(r, c, false));
            }
        }
    }
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_selection_breaks_ties_by_column() {
        assert_eq!(smallest_in_segment(&[1.0, 1.0, 1.0, 1.0], 2).len(), 2);
        let mut got = smallest_in_segment(&[3.0, 1.0, 1.0, 0.5, 1.0], 3);
        got.sort();
        assert_eq!(got, vec![1, 2, 3]);
        assert!(smallest_in_segment(&[1.0], 0).is_empty());
        assert_eq!(smallest_in_segment(&[2.0, 1.0], 2).len(), 2);
    }

    #[test]
    fn block_selection_order() {
        // equal scores: lower column first, then lower row
        let picked = smallest_in_block(|_, _| 1.0, 2, 2, 3);
        assert_eq!(picked, vec![(0, 0), (1, 0), (0, 1)]);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let s = Matrix::from_fn(3, 5, |r, c| (r + c) as f64);
        let k = select_mask(&s, &SparsitySpec::unstructured(0.0)).unwrap();
        assert_eq!(k.dropped(), 0);
        let all = select_mask(&s, &SparsitySpec::unstructured(1.0)).unwrap();
        assert_eq!(all.dropped(), 15);
    }
}
