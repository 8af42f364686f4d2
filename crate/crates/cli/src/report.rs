//! Report documents. Field order is fixed by the struct definitions and maps
//! are ordered, so serialised reports are stable across runs.

use std::collections::BTreeMap;

use prunelab_core::analysis::{BoxStats, NeuronId};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerValue {
    pub layer: usize,
    /// `None` stands for an infinite SNR.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub language: String,
    pub perplexity: Option<f64>,
    pub pruning_error: Option<f64>,
    pub pruning_error_layers: Vec<LayerValue>,
    pub snr: Option<f64>,
    pub snr_layers: Vec<LayerValue>,
    pub snr_infinite_layers: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_id: String,
    /// Calibration languages; empty for the unpruned baseline.
    pub plan: Vec<String>,
    pub seed: Option<u64>,
    pub eval: Vec<EvalCell>,
}

/// Calibration × evaluation table of one metric, averaged over seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub metric: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub values: Vec<Vec<Option<f64>>>,
}

impl Grid {
    /// Evaluation languages whose lowest entry sits on the row calibrated on
    /// that language alone.
    pub fn diagonal_wins(&self) -> usize {
        self.columns
            .iter()
            .enumerate()
            .filter(|(c, lang)| {
                let best = (0..self.rows.len())
                    .filter_map(|r| self.values[r][*c].map(|v| (v, r)))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                best.is_some_and(|(_, r)| self.rows[r] == **lang)
            })
            .count()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub languages: Vec<String>,
    pub baseline: RunMetrics,
    pub runs: Vec<RunMetrics>,
    pub grids: Vec<Grid>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsarRow {
    pub run_id: String,
    pub layer: usize,
    pub language: String,
    pub agnostic: f64,
    pub specific: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsarSection {
    pub rank: usize,
    pub rows: Vec<LsarRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouSection {
    /// Seeds behind each plan's intersection.
    pub seeds: Vec<u64>,
    /// Plan → sub-component → IoU across that plan's seeds.
    pub within: BTreeMap<String, BTreeMap<String, f64>>,
    /// `"A|B"` → sub-component → IoU of the two plans' seed intersections.
    pub between: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LapeSection {
    pub languages: Vec<String>,
    pub group_fraction: f64,
    pub neurons: usize,
    pub group_sizes: Vec<usize>,
    /// Box statistics per group under the unpruned model.
    pub full: Vec<Option<BoxStats>>,
    /// The same groups scored under each pruned model.
    pub runs: BTreeMap<String, Vec<Option<BoxStats>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub config_hash: String,
    pub lsar: Option<LsarSection>,
    pub iou: Option<IouSection>,
    pub lape: Option<LapeSection>,
    pub never_active: Vec<NeuronId>,
}

pub fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

fn fmt_value(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:?}"),
        None => "inf".to_string(),
    }
}

/// Long-format CSV: one row per (run, evaluation language, layer, metric).
/// Model-level values use the layer label `all`.
pub fn metrics_csv(report: &MetricsReport) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| crate::error::CliError::io("metrics.csv", std::io::Error::other(e));
    w.write_record(["config", "run_id", "eval_language", "layer", "metric", "value"])
        .map_err(io)?;
    for run in std::iter::once(&report.baseline).chain(&report.runs) {
        for cell in &run.eval {
            let mut row = |layer: String, metric: &str, value: Option<f64>| {
                w.write_record([
                    report.config_hash.as_str(),
                    &run.run_id,
                    &cell.language,
                    &layer,
                    metric,
                    &fmt_value(value),
                ])
            };
            if let Some(p) = cell.perplexity {
                row("all".into(), "perplexity", Some(p)).map_err(io)?;
            }
            if let Some(e) = cell.pruning_error {
                row("all".into(), "pruning_error", Some(e)).map_err(io)?;
            }
            for lv in &cell.pruning_error_layers {
                row(lv.layer.to_string(), "pruning_error", lv.value).map_err(io)?;
            }
            if !cell.snr_layers.is_empty() {
                row("all".into(), "snr", cell.snr).map_err(io)?;
            }
            for lv in &cell.snr_layers {
                row(lv.layer.to_string(), "snr", lv.value).map_err(io)?;
            }
        }
    }
    w.into_inner()
        .map_err(|e| crate::error::CliError::io("metrics.csv", e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(values: Vec<Vec<f64>>) -> Grid {
        Grid {
            metric: "pruning_error".into(),
            rows: vec!["a".into(), "b".into(), "c".into()],
            columns: vec!["a".into(), "b".into(), "c".into()],
            values: values.into_iter().map(|r| r.into_iter().map(Some).collect()).collect(),
        }
    }

    #[test]
    fn diagonal_wins_counts_column_minima_on_the_matching_row() {
        let g = grid(vec![vec![1.0, 5.0, 5.0], vec![2.0, 1.0, 5.0], vec![3.0, 2.0, 6.0]]);
        assert_eq!(g.diagonal_wins(), 2);
        let all = grid(vec![vec![0.0, 1.0, 1.0], vec![1.0, 0.0, 1.0], vec![1.0, 1.0, 0.0]]);
        assert_eq!(all.diagonal_wins(), 3);
        // mixed-language rows never count as a diagonal win
        let mut mixed = grid(vec![vec![1.0, 1.0, 1.0], vec![1.0, 1.0, 1.0], vec![0.0, 0.0, 0.0]]);
        mixed.rows[2] = "a+b+c".into();
        assert_eq!(mixed.diagonal_wins(), 0);
    }

    #[test]
    fn csv_layout() {
        let cell = EvalCell {
            language: "a".into(),
            perplexity: Some(2.5),
            pruning_error: Some(0.0),
            pruning_error_layers: vec![LayerValue { layer: 0, value: Some(0.0) }],
            snr: None,
            snr_layers: vec![LayerValue { layer: 0, value: None }],
            snr_infinite_layers: vec![0],
        };
        let report = MetricsReport {
            config_hash: "h".into(),
            languages: vec!["a".into()],
            baseline: RunMetrics {
                run_id: "baseline".into(),
                plan: vec![],
                seed: None,
                eval: vec![cell],
            },
            runs: vec![],
            grids: vec![],
        };
        let text = String::from_utf8(metrics_csv(&report).unwrap()).unwrap();
        assert_eq!(
            text,
            "config,run_id,eval_language,layer,metric,value\n\
             h,baseline,a,all,perplexity,2.5\n\
             h,baseline,a,all,pruning_error,0.0\n\
             h,baseline,a,0,pruning_error,0.0\n\
             h,baseline,a,all,snr,inf\n\
             h,baseline,a,0,snr,inf\n"
        );
    }
}
