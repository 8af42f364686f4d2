//! Post-training pruning: magnitude, Wanda and SparseGPT.
//!
//! Weights are `out × in`. Importance is compared within a comparison group
//! (one output row, or the whole matrix) for unstructured sparsity, and within
//! each contiguous run of `M` input columns of a row for N:M sparsity. Ties are
//! broken by dropping the lower column index first, then the lower row index.

mod maskfile;
mod model;
mod select;
mod sparsegpt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;

pub use maskfile::{read_masks, write_masks, MASK_MAGIC, MASK_VERSION};
pub use model::{collect_layer_inputs, prune_model, LayerInputs, MaskBundle, NamedMask, PruneConfig, PrunedModel};
pub use select::select_mask;
pub use sparsegpt::prune_sparsegpt;

pub const DEFAULT_DAMPING_FRAC: f64 = 0.01;
pub const DEFAULT_BLOCK_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SparsityPattern {
    /// Drop `floor(ratio · group size)` entries per comparison group.
    Unstructured { ratio: f64 },
    /// Keep exactly `n` of every `m` consecutive input columns in each row.
    #[serde(rename = "n_of_m")]
    NofM { n: usize, m: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ComparisonGroup {
    #[default]
    PerRow,
    WholeMatrix,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsitySpec {
    pub pattern: SparsityPattern,
    /// Only meaningful for unstructured sparsity; N:M groups are always row-local.
    #[serde(default)]
    pub group: ComparisonGroup,
}

impl SparsitySpec {
    pub fn unstructured(ratio: f64) -> Self {
        Self {
            pattern: SparsityPattern::Unstructured { ratio },
            group: ComparisonGroup::PerRow,
        }
    }

    pub fn n_of_m(n: usize, m: usize) -> Self {
        Self {
            pattern: SparsityPattern::NofM { n, m },
            group: ComparisonGroup::PerRow,
        }
    }

    pub fn with_group(mut self, group: ComparisonGroup) -> Self {
        self.group = group;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.pattern {
            SparsityPattern::Unstructured { ratio } => {
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::arg(format!("sparsity ratio {ratio} outside [0, 1]")));
                }
            }
            SparsityPattern::NofM { n, m } => {
                if m == 0 || n >= m {
                    return Err(Error::arg(format!("N:M requires N < M, got {n}:{m}")));
                }
            }
        }
        Ok(())
    }

    /// Checks the sparsity settings against a `rows × cols` weight matrix.
    pub fn validate_for(&self, rows: usize, cols: usize) -> Result<()> {
        self.validate()?;
        if let SparsityPattern::NofM { n, m } = self.pattern {
            if cols % m != 0 {
                return Err(Error::arg(format!(
                    "{n}:{m} sparsity needs M to divide the column count {cols}"
                )));
            }
        }
        if rows == 0 || cols == 0 {
            return Err(Error::arg("cannot prune an empty matrix"));
        }
        Ok(())
    }

    /// Entries to drop from a comparison group of `size` entries.
    pub fn zeros_per_group(&self, size: usize) -> usize {
        match self.pattern {
            SparsityPattern::Unstructured { ratio } => (ratio * size as f64).floor() as usize,
            SparsityPattern::NofM { n, m } => (size / m) * (m - n),
        }
    }

    /// Short human-readable form, e.g. `unstructured-0.5-row` or `2:4`.
    pub fn label(&self) -> String {
        match (self.pattern, self.group) {
            (SparsityPattern::Unstructured { ratio }, ComparisonGroup::PerRow) => {
                format!("unstructured-{ratio}-row")
            }
            (SparsityPattern::Unstructured { ratio }, ComparisonGroup::WholeMatrix) => {
                format!("unstructured-{ratio}-matrix")
            }
            (SparsityPattern::NofM { n, m }, _) => format!("{n}:{m}"),
        }
    }
}

/// Boolean keep/drop table shaped like a weight matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeepMatrix {
    rows: usize,
    cols: usize,
    keep: Vec<bool>,
}

impl KeepMatrix {
    pub fn all(rows: usize, cols: usize, keep: bool) -> Self {
        Self {
            rows,
            cols,
            keep: vec![keep; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, keep: Vec<bool>) -> Result<Self> {
        if keep.len() != rows * cols {
            return Err(Error::arg("keep flag count does not match shape"));
        }
        Ok(Self { rows, cols, keep })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.keep[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, keep: bool) {
        self.keep[r * self.cols + c] = keep;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.keep[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.keep
    }

    pub fn dropped(&self) -> usize {
        self.keep.iter().filter(|&&k| !k).count()
    }

    /// Flat row-major indices of dropped entries.
    pub fn dropped_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| (!k).then_some(i))
    }
}

/// Where a mask came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Calibration language tags, in mixing order.
    pub languages: Vec<String>,
    pub seed: u64,
    /// Free-form tag, e.g. the experiment config hash.
    pub tag: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningMask {
    pub keep: KeepMatrix,
    pub spec: SparsitySpec,
    pub provenance: Provenance,
}

impl PruningMask {
    pub fn shape(&self) -> (usize, usize) {
        self.keep.shape()
    }

    /// Verifies the exact zero count of every comparison group.
    pub fn check_exact(&self) -> Result<()> {
        let (rows, cols) = self.shape();
        let fail = |what: String| Err(Error::numeric(format!("mask sparsity violated: {what}")));
        match (self.spec.pattern, self.spec.group) {
            (SparsityPattern::Unstructured { .. }, ComparisonGroup::PerRow) => {
                let want = self.spec.zeros_per_group(cols);
                for r in 0..rows {
                    let z = self.keep.row(r).iter().filter(|&&k| !k).count();
                    if z != want {
                        return fail(format!("row {r} has {z} zeros, expected {want}"));
                    }
                }
            }
            (SparsityPattern::Unstructured { .. }, ComparisonGroup::WholeMatrix) => {
                let want = self.spec.zeros_per_group(rows * cols);
                let z = self.keep.dropped();
                if z != want {
                    return fail(format!("matrix has {z} zeros, expected {want}"));
                }
            }
            (SparsityPattern::NofM { n, m }, _) => {
                for r in 0..rows {
                    for (g, chunk) in self.keep.row(r).chunks(m).enumerate() {
                        let z = chunk.iter().filter(|&&k| !k).count();
                        if chunk.len() != m || z != m - n {
                            return fail(format!("row {r} group {g} has {z} zeros, expected {}", m - n));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Elementwise product of `w` with the keep flags.
pub fn apply_mask(w: &Matrix, mask: &PruningMask) -> Result<Matrix> {
    if w.shape() != mask.shape() {
        return Err(Error::arg(format!(
            "mask shape {:?} does not match weight shape {:?}",
            mask.shape(),
            w.shape()
        )));
    }
    let mut out = w.clone();
    for (v, &k) in out.as_mut_slice().iter_mut().zip(mask.keep.as_slice()) {
        if !k {
            *v = 0.0;
        }
    }
    Ok(out)
}

/// Drops the smallest `|w|` entries.
pub fn prune_magnitude(w: &Matrix, spec: &SparsitySpec) -> Result<PruningMask> {
    spec.validate_for(w.rows(), w.cols())?;
    let scores = w.map(f64::abs);
    Ok(PruningMask {
        keep: select_mask(&scores, spec)?,
        spec: *spec,
        provenance: Provenance::default(),
    })
}

/// Wanda importance `|w_ij| · ‖x_j‖₂`, where `x` is `in_features × tokens`.
pub fn wanda_scores(w: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.rows() != w.cols() {
        return Err(Error::arg(format!(
            "input features {} do not match weight columns {}",
            x.rows(),
            w.cols()
        )));
    }
    let norms: Vec<f64> = (0..x.rows())
        .map(|j| crate::numerics::norm2(x.row(j)))
        .collect();
    Ok(Matrix::from_fn(w.rows(), w.cols(), |r, c| w[(r, c)].abs() * norms[c]))
}

pub fn prune_wanda(w: &Matrix, x: &Matrix, spec: &SparsitySpec) -> Result<PruningMask> {
    spec.validate_for(w.rows(), w.cols())?;
    let scores = wanda_scores(w, x)?;
    Ok(PruningMask {
        keep: select_mask(&scores, spec)?,
        spec: *spec,
        provenance: Provenance::default(),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Magnitude,
    #[default]
    Wanda,
    SparseGpt,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Magnitude => "magnitude",
            Method::Wanda => "wanda",
            Method::SparseGpt => "sparsegpt",
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

    #[test]
    fn magnitude_keeps_largest() {
        let w = Matrix::from_rows(&[vec![1.0, -2.0, 3.0, -4.0]]).unwrap();
        let m = prune_magnitude(&w, &SparsitySpec::unstructured(0.5)).unwrap();
        assert_eq!(m.keep.row(0), &[false, false, true, true]);
    }

    #[test]
    fn two_four_ties_drop_lower_columns() {
        let w = Matrix::from_rows(&[vec![1.0, 1.0, 1.0, 1.0]]).unwrap();
        let m = prune_magnitude(&w, &SparsitySpec::n_of_m(2, 4)).unwrap();
        assert_eq!(m.keep.row(0), &[false, false, true, true]);
    }

    #[test]
    fn magnitude_matches_sort_oracle() {
        for s in 0..10 {
            let w = random(8, 16, s);
            let mask = prune_magnitude(&w, &SparsitySpec::unstructured(0.5)).unwrap();
            for r in 0..8 {
                let mut idx: Vec<usize> = (0..16).collect();
                idx.sort_by(|&a, &b| w[(r, a)].abs().partial_cmp(&w[(r, b)].abs()).unwrap());
                for (rank, &c) in idx.iter().enumerate() {
                    assert_eq!(mask.keep.get(r, c), rank >= 8);
                }
            }
        }
    }

    #[test]
    fn nm_requires_divisible_columns() {
        let w = random(2, 6, 0);
        assert!(matches!(
            prune_magnitude(&w, &SparsitySpec::n_of_m(2, 4)),
            Err(Error::Argument(_))
        ));
        assert!(SparsitySpec::n_of_m(4, 4).validate().is_err());
        assert!(SparsitySpec::unstructured(1.5).validate().is_err());
    }

    #[test]
    fn wanda_reduces_to_magnitude_with_equal_norms() {
        let w = random(8, 16, 4);
        let x = Matrix::from_fn(16, 5, |_, c| if c == 0 { 2.0 } else { 0.0 });
        let spec = SparsitySpec::unstructured(0.5);
        assert_eq!(prune_wanda(&w, &x, &spec).unwrap().keep, prune_magnitude(&w, &spec).unwrap().keep);
    }

    #[test]
    fn wanda_prunes_dead_inputs_first() {
        let w = random(6, 8, 5);
        let mut x = random(8, 10, 6);
        x.row_mut(0).fill(0.0);
        let mask = prune_wanda(&w, &x, &SparsitySpec::unstructured(0.25)).unwrap();
        for r in 0..6 {
            assert!(!mask.keep.get(r, 0));
        }
        assert!(prune_wanda(&w, &random(7, 10, 1), &SparsitySpec::unstructured(0.5)).is_err());
    }

    #[test]
    fn apply_mask_semantics() {
        let w = random(3, 4, 9);
        let keep_all = PruningMask {
            keep: KeepMatrix::all(3, 4, true),
            spec: SparsitySpec::unstructured(0.0),
            provenance: Provenance::default(),
        };
        assert_eq!(apply_mask(&w, &keep_all).unwrap(), w);
        let drop_all = PruningMask {
            keep: KeepMatrix::all(3, 4, false),
            ..keep_all.clone()
        };
        assert_eq!(apply_mask(&w, &drop_all).unwrap(), Matrix::zeros(3, 4));
        let half = prune_magnitude(&w, &SparsitySpec::unstructured(0.5)).unwrap();
        let once = apply_mask(&w, &half).unwrap();
        assert_eq!(apply_mask(&once, &half).unwrap(), once);
        assert!(apply_mask(&random(4, 3, 1), &half).is_err());
    }

    #[test]
    fn whole_matrix_group() {
        let w = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 6.0]]).unwrap();
        let spec = SparsitySpec::unstructured(0.5).with_group(ComparisonGroup::WholeMatrix);
        let m = prune_magnitude(&w, &spec).unwrap();
        assert_eq!(m.keep.as_slice(), &[false, true, false, true]);
        m.check_exact().unwrap();
    }

    #[test]
    fn exactness_checker_flags_violations() {
        let mut m = prune_magnitude(&random(4, 8, 2), &SparsitySpec::unstructured(0.5)).unwrap();
        m.check_exact().unwrap();
        m.keep.set(0, 0, !m.keep.get(0, 0));
        assert!(m.check_exact().is_err());
    }
}
