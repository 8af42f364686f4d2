use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;
use crate::toymodel::{CaptureFlags, ToyModel};

pub const DEFAULT_GROUP_FRACTION: f64 = 0.02;

/// FFN neuron address.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub index: usize,
}

/// Fraction of positions (all positions of all sequences) at which each FFN
/// neuron fires, indexed `[layer][neuron]`.
pub fn activation_probability(model: &ToyModel, corpus: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    if corpus.is_empty() {
        return Err(Error::arg("corpus is empty"));
    }
    let counts = par::map_slice(corpus, |s| {
        model.forward(s, CaptureFlags {
            hidden: false,
            activations: true,
        })
        .map(|(_, t)| (t.n_tokens(), t.active.iter().map(|a| a.column_counts()).collect::<Vec<_>>()))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let d_ffn = model.config.d_ffn;
    let mut total = vec![vec![0usize; d_ffn]; model.n_layers()];
    let mut positions = 0usize;
    for (n, per_layer) in counts {
        positions += n;
        for (acc, c) in total.iter_mut().zip(per_layer) {
            acc.iter_mut().zip(c).for_each(|(a, b)| *a += b);
        }
    }
    Ok(total
        .into_iter()
        .map(|l| l.into_iter().map(|c| c as f64 / positions as f64).collect())
        .collect())
}

/// Entropy `−Σ p̃ ln p̃` of the L1-normalized activation probabilities;
/// `None` for a neuron that never fires in any language.
pub fn lape(p: &[f64]) -> Result<Option<f64>> {
    if p.len() < 2 {
        return Err(Error::arg(format!("need at least two languages, got {}", p.len())));
    }
    if let Some(v) = p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::arg(format!("activation probability {v} outside [0, 1]")));
    }
    let sum: f64 = p.iter().sum();
    if sum == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        -p.iter()
            .filter(|&&v| v > 0.0)
            .map(|&v| {
                let q = v / sum;
                q * q.ln()
            })
            .sum::<f64>(),
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapeEntry {
    pub neuron: NeuronId,
    /// Activation probability per language, in table language order.
    pub probabilities: Vec<f64>,
    pub score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapeTable {
    pub languages: Vec<String>,
    /// Sorted by neuron id.
    pub entries: Vec<LapeEntry>,
}

impl LapeTable {
    /// Builds the table from per-language `[layer][neuron]` probabilities.
    pub fn from_probabilities(languages: Vec<String>, per_language: &[Vec<Vec<f64>>]) -> Result<Self> {
        if languages.len() != per_language.len() {
            return Err(Error::arg("one probability table per language required"));
        }
        let first = per_language.first().ok_or_else(|| Error::arg("no languages"))?;
        let shape: Vec<usize> = first.iter().map(Vec::len).collect();
        if per_language
            .iter()
            .any(|t| t.iter().map(Vec::len).collect::<Vec<_>>() != shape)
        {
            return Err(Error::arg("probability tables have different shapes"));
        }
        let mut entries = Vec::new();
        for (layer, &width) in shape.iter().enumerate() {
            for index in 0..width {
                let probabilities: Vec<f64> = per_language.iter().map(|t| t[layer][index]).collect();
                let score = lape(&probabilities)?;
                entries.push(LapeEntry {
                    neuron: NeuronId { layer, index },
                    probabilities,
                    score,
                });
            }
        }
        Ok(Self { languages, entries })
    }

    pub fn score(&self, neuron: NeuronId) -> Option<f64> {
        self.entries
            .binary_search_by(|e| e.neuron.cmp(&neuron))
            .ok()
            .and_then(|i| self.entries[i].score)
    }

    pub fn never_active(&self) -> Vec<NeuronId> {
        self.entries
            .iter()
            .filter(|e| e.score.is_none())
            .map(|e| e.neuron)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapeGroups {
    /// Consecutive runs of the ascending score order.
    pub groups: Vec<Vec<NeuronId>>,
    pub never_active: Vec<NeuronId>,
}

impl LapeGroups {
    /// Box statistics of each group under `table`'s scores; neurons without a
    /// score in `table` are skipped.
    pub fn stats(&self, table: &LapeTable) -> Vec<Option<BoxStats>> {
        self.groups
            .iter()
            .map(|g| {
                let v: Vec<f64> = g.iter().filter_map(|&n| table.score(n)).collect();
                boxplot(&v)
            })
            .collect()
    }
}

/// Sorts scored neurons by ascending LAPE (ties by layer, then index) and cuts
/// them into groups of `⌈fraction · n⌉`.
pub fn lape_groups(table: &LapeTable, fraction: f64) -> Result<LapeGroups> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("group fraction {fraction} outside (0, 1]")));
    }
    if table.entries.is_empty() {
        return Err(Error::arg("LAPE table is empty"));
    }
    let mut scored: Vec<(f64, NeuronId)> = table
        .entries
        .iter()
        .filter_map(|e| e.score.map(|s| (s, e.neuron)))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let size = ((fraction * scored.len() as f64).ceil() as usize).max(1);
    Ok(LapeGroups {
        groups: scored
            .chunks(size)
            .map(|c| c.iter().map(|&(_, n)| n).collect())
            .collect(),
        never_active: table.never_active(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// Five-number summary with linearly interpolated quartiles.
pub fn boxplot(values: &[f64]) -> Option<BoxStats> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    Some(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}
