use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::pruner::{KeepMatrix, MaskBundle};
use crate::toymodel::LinearKind;

/// Sub-component names in report order.
pub const SUB_COMPONENTS: [LinearKind; 7] = LinearKind::ALL;

/// Set of flat weight indices over a fixed universe, stored as a bitset.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct IndexSet {
    universe: usize,
    words: Vec<u64>,
}

impl IndexSet {
    pub fn empty(universe: usize) -> Self {
        Self {
            universe,
            words: vec![0; universe.div_ceil(64)],
        }
    }

    pub fn from_indices(universe: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut set = Self::empty(universe);
        for i in indices {
            if i >= universe {
                return Err(Error::arg(format!("index {i} outside universe {universe}")));
            }
            set.words[i / 64] |= 1 << (i % 64);
        }
        Ok(set)
    }

    /// Pruned (dropped) positions of a mask.
    pub fn pruned(keep: &KeepMatrix) -> Self {
        let (r, c) = keep.shape();
        Self::from_indices(r * c, keep.dropped_indices()).expect("indices within shape")
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn len(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn contains(&self, i: usize) -> bool {
        i < self.universe && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    fn zip_with(&self, other: &Self, f: impl Fn(u64, u64) -> u64) -> Result<Self> {
        if self.universe != other.universe {
            return Err(Error::arg(format!(
                "index sets over different universes: {} vs {}",
                self.universe, other.universe
            )));
        }
        Ok(Self {
            universe: self.universe,
            words: self.words.iter().zip(&other.words).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a & b)
    }

    pub fn union(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, |a, b| a | b)
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.universe == other.universe && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }
}

/// Intersection and union of all `sets`.
pub fn mask_intersection(sets: &[IndexSet]) -> Result<(IndexSet, IndexSet)> {
    let (first, rest) = sets.split_first().ok_or_else(|| Error::arg("no masks given"))?;
    let mut inter = first.clone();
    let mut union = first.clone();
    for s in rest {
        inter = inter.intersection(s)?;
        union = union.union(s)?;
    }
    Ok((inter, union))
}

/// `|a ∩ b| / |a ∪ b|`.
pub fn mask_iou(a: &IndexSet, b: &IndexSet) -> Result<f64> {
    let union = a.union(b)?.len();
    if union == 0 {
        return Err(Error::arg("IoU of two empty sets is undefined"));
    }
    Ok(a.intersection(b)?.len() as f64 / union as f64)
}

/// Pruned-index sets of one matrix across runs.
fn sets_for(runs: &[&MaskBundle], layer: usize, kind: LinearKind) -> Result<Vec<IndexSet>> {
    runs.iter()
        .map(|b| {
            b.get(layer, kind)
                .map(|m| IndexSet::pruned(&m.keep))
                .ok_or_else(|| Error::arg(format!("run has no mask for layer {layer} {}", kind.name())))
        })
        .collect()
}

fn layer_count(runs: &[&MaskBundle]) -> Result<usize> {
    let first = runs.first().ok_or_else(|| Error::arg("no runs given"))?;
    Ok(first.iter().map(|m| m.layer + 1).max().unwrap_or(0))
}

/// Per (layer, sub-component) intersection of pruned indices across seeds,
/// indexed `[layer][sub-component]`.
pub fn seed_intersections(runs: &[&MaskBundle]) -> Result<Vec<Vec<IndexSet>>> {
    (0..layer_count(runs)?)
        .map(|layer| {
            SUB_COMPONENTS
                .iter()
                .map(|&kind| Ok(mask_intersection(&sets_for(runs, layer, kind)?)?.0))
                .collect()
        })
        .collect()
}

fn average_by_component(per_layer: Vec<Vec<f64>>) -> BTreeMap<String, f64> {
    let n = per_layer.len() as f64;
    SUB_COMPONENTS
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let mean = per_layer.iter().map(|row| row[k]).sum::<f64>() / n;
            (kind.name().to_string(), mean)
        })
        .collect()
}

/// Agreement of one language's seeds: `|⋂| / |⋃|` per matrix, averaged over
/// layers for each sub-component.
pub fn within_language_iou(runs: &[&MaskBundle]) -> Result<BTreeMap<String, f64>> {
    let per_layer = (0..layer_count(runs)?)
        .map(|layer| {
            SUB_COMPONENTS
                .iter()
                .map(|&kind| {
                    let (inter, union) = mask_intersection(&sets_for(runs, layer, kind)?)?;
                    if union.is_empty() {
                        return Err(Error::arg("IoU of two empty sets is undefined"));
                    }
                    Ok(inter.len() as f64 / union.len() as f64)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(average_by_component(per_layer))
}

/// IoU of two languages' seed intersections, averaged over layers for each
/// sub-component.
pub fn between_language_iou(a: &[&MaskBundle], b: &[&MaskBundle]) -> Result<BTreeMap<String, f64>> {
    let ia = seed_intersections(a)?;
    let ib = seed_intersections(b)?;
    if ia.len() != ib.len() {
        return Err(Error::arg("runs cover different numbers of layers"));
    }
    let per_layer = ia
        .iter()
        .zip(&ib)
        .map(|(la, lb)| la.iter().zip(lb).map(|(x, y)| mask_iou(x, y)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(average_by_component(per_layer))
}
