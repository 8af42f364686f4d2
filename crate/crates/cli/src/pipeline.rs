//! The four pipeline stages. Each stage reads only artifacts of the previous
//! ones, so stages can be rerun independently.

use std::collections::BTreeMap;
use std::path::PathBuf;

use prunelab_core::analysis::{
    activation_probability, between_language_iou, delta_magnitude, lape_groups, lsar_fit,
    within_language_iou, Component, LapeTable,
};
use prunelab_core::corpus::{calibration_sample, equal_shares, make_language, CalibrationSet, LanguageSpec, Token};
use prunelab_core::metrics::{mean_value, perplexity, pruning_error, snr};
use prunelab_core::numerics::Matrix;
use prunelab_core::par;
use prunelab_core::pruner::{prune_model, MaskBundle, PruneConfig};
use prunelab_core::toymodel::{sentence_embedding, CaptureFlags, HiddenTrace, ToyModel};

use crate::artifacts::{run_id, write_file, Layout, Split};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::report::{
    metrics_csv, to_json, AnalysisReport, EvalCell, Grid, IouSection, LapeSection, LayerValue,
    LsarRow, LsarSection, MetricsReport, RunMetrics,
};

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub layout: Layout,
}

/// One pruning job: a calibration plan under one repeat seed.
#[derive(Clone, Debug)]
pub struct Run {
    pub plan: Vec<String>,
    pub seed: u64,
    pub id: String,
}

impl Pipeline {
    /// `out` overrides the config's output directory.
    pub fn new(config: ExperimentConfig, out: Option<PathBuf>) -> Self {
        let root = out.unwrap_or_else(|| config.out_dir.clone());
        let layout = Layout::new(root, config.hash());
        Self { config, layout }
    }

    pub fn runs(&self) -> Vec<Run> {
        let mut out = Vec::new();
        for plan in self.config.plans() {
            for &seed in &self.config.calibration.seeds {
                out.push(Run {
                    id: run_id(&plan, seed),
                    plan: plan.clone(),
                    seed,
                });
            }
        }
        out
    }

    fn tags(&self) -> &[String] {
        &self.config.languages.tags
    }

    pub fn languages(&self) -> CliResult<Vec<LanguageSpec>> {
        let l = &self.config.languages;
        l.tags
            .iter()
            .zip(&l.seeds)
            .map(|(tag, &seed)| Ok(make_language(tag.clone(), l.vocab, l.concentration, seed)?))
            .collect()
    }

    /// Writes calibration and validation corpora for every language.
    pub fn gen(&self) -> CliResult<()> {
        let cal = &self.config.calibration;
        let ev = &self.config.evaluation;
        for lang in self.languages()? {
            let tag = lang.language_id.clone();
            let draw = |n: usize, len: usize, seed: u64| -> CliResult<Vec<Vec<Token>>> {
                par::map_range(n, |i| calibration_sample(&lang, len, seed, i))
                    .into_iter()
                    .map(|s| s.map_err(CliError::from))
                    .collect()
            };
            let calib = cal
                .seeds
                .iter()
                .map(|&s| Ok((s, draw(cal.budget, cal.seq_len, s)?)))
                .collect::<CliResult<Vec<_>>>()?;
            self.layout.write_corpus(&tag, Split::Calibration, calib)?;
            let valid = draw(ev.samples, ev.seq_len, ev.seed)?;
            self.layout.write_corpus(&tag, Split::Validation, vec![(ev.seed, valid)])?;
            log::info!("wrote corpora for {tag}");
        }
        Ok(())
    }

    /// Equal-share mix of the plan's languages from the stored calibration
    /// corpora: each language contributes the first samples of its block.
    pub fn calibration_set(&self, run: &Run) -> CliResult<CalibrationSet> {
        let shares = equal_shares(run.plan.len(), self.config.calibration.budget);
        let (mut samples, mut labels) = (Vec::new(), Vec::new());
        for (tag, share) in run.plan.iter().zip(shares) {
            let seqs = self.layout.read_corpus(tag, Split::Calibration, run.seed)?;
            if seqs.len() < share {
                return Err(CliError::Missing {
                    path: self.layout.corpus(tag, Split::Calibration),
                    stage: "gen",
                });
            }
            samples.extend(seqs.into_iter().take(share));
            labels.extend(std::iter::repeat_n(tag.clone(), share));
        }
        Ok(CalibrationSet::from_parts(samples, labels, self.config.calibration.seq_len)?)
    }

    pub fn prune_config(&self) -> PruneConfig {
        let p = &self.config.pruning;
        PruneConfig {
            method: p.method,
            spec: p.sparsity,
            damping_frac: p.damping_frac,
            block_size: p.block_size,
        }
    }

    /// Initialises the base model and prunes it once per run.
    pub fn prune(&self) -> CliResult<()> {
        let runs = self.runs();
        let calibs = runs
            .iter()
            .map(|r| self.calibration_set(r))
            .collect::<CliResult<Vec<_>>>()?;
        let base = ToyModel::init(self.config.model_config())?;
        self.layout.write_model(&self.layout.base_model(), &base)?;
        let cfg = self.prune_config();
        let results = par::map_range(runs.len(), |i| prune_model(&base, &calibs[i], &cfg, runs[i].seed));
        for (run, result) in runs.iter().zip(results) {
            let pruned = result?;
            pruned.masks.check_exact()?;
            self.layout.write_model(&self.layout.pruned_model(&run.id), &pruned.model)?;
            self.layout.write_masks(&run.id, &pruned.masks)?;
            log::info!("pruned {}", run.id);
        }
        Ok(())
    }

    fn validation(&self) -> CliResult<Vec<Vec<Vec<Token>>>> {
        self.tags()
            .iter()
            .map(|t| self.layout.read_corpus(t, Split::Validation, self.config.evaluation.seed))
            .collect()
    }

    fn pruned_models(&self) -> CliResult<Vec<(Run, ToyModel)>> {
        self.runs()
            .into_iter()
            .map(|r| {
                let m = self.layout.read_model(&self.layout.pruned_model(&r.id))?;
                Ok((r, m))
            })
            .collect()
    }

    /// Perplexity, pruning error and SNR of every run on every evaluation
    /// language, plus the unpruned baseline.
    pub fn eval(&self) -> CliResult<MetricsReport> {
        let base = self.layout.read_model(&self.layout.base_model())?;
        let valid = self.validation()?;
        let full: Vec<HiddenTrace> = valid
            .iter()
            .map(|seqs| trace(&base, seqs))
            .collect::<CliResult<_>>()?;
        // the baseline against itself has zero error and no finite SNR
        let baseline = self.evaluate("baseline", &base, &valid, &full, false)?;
        let mut runs = Vec::new();
        for (run, model) in self.pruned_models()? {
            let mut m = self.evaluate(&run.id, &model, &valid, &full, self.config.evaluation.snr)?;
            m.plan = run.plan;
            m.seed = Some(run.seed);
            runs.push(m);
        }
        let grids = self.grids(&runs);
        let report = MetricsReport {
            config_hash: self.layout.hash.clone(),
            languages: self.tags().to_vec(),
            baseline,
            runs,
            grids,
        };
        write_file(&self.layout.report("metrics.json"), &to_json(&report))?;
        write_file(&self.layout.report("metrics.csv"), &metrics_csv(&report)?)?;
        Ok(report)
    }

    fn evaluate(
        &self,
        id: &str,
        model: &ToyModel,
        valid: &[Vec<Vec<Token>>],
        full: &[HiddenTrace],
        with_snr: bool,
    ) -> CliResult<RunMetrics> {
        let ev = &self.config.evaluation;
        let mut eval = Vec::new();
        for ((tag, seqs), full) in self.tags().iter().zip(valid).zip(full) {
            let pruned = if ev.pruning_error || with_snr {
                Some(trace(model, seqs)?)
            } else {
                None
            };
            let mut cell = EvalCell {
                language: tag.clone(),
                perplexity: None,
                pruning_error: None,
                pruning_error_layers: Vec::new(),
                snr: None,
                snr_layers: Vec::new(),
                snr_infinite_layers: Vec::new(),
            };
            if ev.perplexity {
                cell.perplexity = Some(perplexity(model, seqs)?);
            }
            if let Some(p) = &pruned {
                if ev.pruning_error {
                    let layers = pruning_error(full, p)?;
                    cell.pruning_error = mean_value(&layers);
                    cell.pruning_error_layers = layers
                        .iter()
                        .map(|m| LayerValue {
                            layer: m.layer,
                            value: Some(m.value),
                        })
                        .collect();
                }
                if with_snr {
                    let s = snr(full, p)?;
                    cell.snr = s.average;
                    cell.snr_layers = s
                        .layers
                        .iter()
                        .map(|m| LayerValue {
                            layer: m.layer,
                            value: m.value.is_finite().then_some(m.value),
                        })
                        .collect();
                    cell.snr_infinite_layers = s.infinite_layers;
                }
            }
            eval.push(cell);
        }
        Ok(RunMetrics {
            run_id: id.to_string(),
            plan: Vec::new(),
            seed: None,
            eval,
        })
    }

    fn grids(&self, runs: &[RunMetrics]) -> Vec<Grid> {
        let plans: Vec<String> = self.config.plans().iter().map(|p| p.join("+")).collect();
        let metrics: [(&str, fn(&EvalCell) -> Option<f64>); 3] = [
            ("perplexity", |c| c.perplexity),
            ("pruning_error", |c| c.pruning_error),
            ("snr", |c| c.snr),
        ];
        metrics
            .into_iter()
            .filter(|(name, _)| match *name {
                "perplexity" => self.config.evaluation.perplexity,
                "pruning_error" => self.config.evaluation.pruning_error,
                _ => self.config.evaluation.snr,
            })
            .map(|(name, get)| {
                let values = plans
                    .iter()
                    .map(|plan| {
                        (0..self.tags().len())
                            .map(|c| {
                                let v: Option<Vec<f64>> = runs
                                    .iter()
                                    .filter(|r| r.plan.join("+") == *plan)
                                    .map(|r| get(&r.eval[c]))
                                    .collect();
                                v.filter(|v| !v.is_empty())
                                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
                            })
                            .collect()
                    })
                    .collect();
                Grid {
                    metric: name.to_string(),
                    rows: plans.clone(),
                    columns: self.tags().to_vec(),
                    values,
                }
            })
            .collect()
    }

    /// Subspace, mask and neuron-level analysis of every run.
    pub fn analyze(&self) -> CliResult<AnalysisReport> {
        let a = &self.config.analysis;
        let base = self.layout.read_model(&self.layout.base_model())?;
        let valid = self.validation()?;
        let runs = self.runs();
        let mut report = AnalysisReport {
            config_hash: self.layout.hash.clone(),
            lsar: None,
            iou: None,
            lape: None,
            never_active: Vec::new(),
        };
        if a.lsar {
            report.lsar = self.lsar(&base, &valid)?;
        }
        if a.iou {
            let masks = runs
                .iter()
                .map(|r| self.layout.read_masks(&r.id))
                .collect::<CliResult<Vec<_>>>()?;
            report.iou = Some(self.iou(&runs, &masks)?);
        }
        if a.lape {
            let (section, never) = self.lape(&base, &valid)?;
            report.lape = section;
            report.never_active = never;
        }
        write_file(&self.layout.report("analysis.json"), &to_json(&report))?;
        Ok(report)
    }

    fn lsar(&self, base: &ToyModel, valid: &[Vec<Vec<Token>>]) -> CliResult<Option<LsarSection>> {
        let n_lang = self.tags().len();
        if n_lang < 2 {
            log::warn!("LSAR needs at least two languages; section skipped");
            return Ok(None);
        }
        let rank = self.config.analysis.lsar_rank.unwrap_or(self.config.lsar_rank_limit());
        let full = embeddings(base, valid)?;
        let layers = base.n_layers();
        let d = base.config.d_model;
        let bases = (0..layers)
            .map(|layer| {
                let means = Matrix::from_fn(d, n_lang, |i, l| {
                    let e = &full[l][layer];
                    e.iter().map(|v| v[i]).sum::<f64>() / e.len() as f64
                });
                lsar_fit(&means, rank).map_err(|e| CliError::Numeric(format!("LSAR layer {layer}: {e}")))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let mut rows = Vec::new();
        for (run, model) in self.pruned_models()? {
            let pruned = embeddings(&model, valid)?;
            for (layer, basis) in bases.iter().enumerate() {
                for (l, tag) in self.tags().iter().enumerate() {
                    let (f, p) = (&full[l][layer], &pruned[l][layer]);
                    rows.push(LsarRow {
                        run_id: run.id.clone(),
                        layer,
                        language: tag.clone(),
                        agnostic: delta_magnitude(f, p, basis, Component::Agnostic)?,
                        specific: delta_magnitude(f, p, basis, Component::Specific)?,
                    });
                }
            }
        }
        Ok(Some(LsarSection { rank, rows }))
    }

    fn iou(&self, runs: &[Run], masks: &[MaskBundle]) -> CliResult<IouSection> {
        let seeds = self.config.calibration.seeds.clone();
        if seeds.len() < 2 {
            log::warn!("only one calibration seed; IoU uses single-seed mask sets");
        }
        let plans: Vec<String> = self.config.plans().iter().map(|p| p.join("+")).collect();
        let of = |plan: &str| -> Vec<&MaskBundle> {
            runs.iter()
                .zip(masks)
                .filter(|(r, _)| r.plan.join("+") == plan)
                .map(|(_, m)| m)
                .collect()
        };
        let mut within = BTreeMap::new();
        let mut between = BTreeMap::new();
        for (i, a) in plans.iter().enumerate() {
            within.insert(a.clone(), within_language_iou(&of(a))?);
            for b in &plans[i + 1..] {
                between.insert(format!("{a}|{b}"), between_language_iou(&of(a), &of(b))?);
            }
        }
        Ok(IouSection { seeds, within, between })
    }

    fn lape(
        &self,
        base: &ToyModel,
        valid: &[Vec<Vec<Token>>],
    ) -> CliResult<(Option<LapeSection>, Vec<prunelab_core::analysis::NeuronId>)> {
        if self.tags().len() < 2 {
            log::warn!("LAPE needs at least two languages; section skipped");
            return Ok((None, Vec::new()));
        }
        let table = |m: &ToyModel| -> CliResult<LapeTable> {
            let probs = valid
                .iter()
                .map(|seqs| activation_probability(m, seqs))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(LapeTable::from_probabilities(self.tags().to_vec(), &probs)?)
        };
        let full = table(base)?;
        let fraction = self.config.analysis.lape_group_fraction;
        let groups = lape_groups(&full, fraction)?;
        let mut runs = BTreeMap::new();
        for (run, model) in self.pruned_models()? {
            runs.insert(run.id, groups.stats(&table(&model)?));
        }
        let section = LapeSection {
            languages: self.tags().to_vec(),
            group_fraction: fraction,
            neurons: full.entries.len(),
            group_sizes: groups.groups.iter().map(Vec::len).collect(),
            full: groups.stats(&full),
            runs,
        };
        Ok((Some(section), groups.never_active))
    }

    pub fn all(&self) -> CliResult<(MetricsReport, AnalysisReport)> {
        self.gen()?;
        self.prune()?;
        let metrics = self.eval()?;
        let analysis = self.analyze()?;
        Ok((metrics, analysis))
    }
}

/// Hidden states of every sequence, stacked token-wise.
fn trace(model: &ToyModel, seqs: &[Vec<Token>]) -> CliResult<HiddenTrace> {
    let flags = CaptureFlags {
        hidden: true,
        activations: false,
    };
    let traces = par::map_slice(seqs, |s| model.forward(s, flags).map(|(_, t)| t))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    Ok(HiddenTrace::concat(&traces)?)
}

/// Sentence embeddings indexed `[language][layer][sample]`.
fn embeddings(model: &ToyModel, valid: &[Vec<Vec<Token>>]) -> CliResult<Vec<Vec<Vec<Vec<f64>>>>> {
    let flags = CaptureFlags {
        hidden: true,
        activations: false,
    };
    valid
        .iter()
        .map(|seqs| {
            let traces = par::map_slice(seqs, |s| model.forward(s, flags).map(|(_, t)| t))
                .into_iter()
                .collect::<Result<Vec<_>, _>>()?;
            (0..model.n_layers())
                .map(|layer| {
                    traces
                        .iter()
                        .map(|t| Ok(sentence_embedding(t, layer)?))
                        .collect::<CliResult<Vec<_>>>()
                })
                .collect()
        })
        .collect()
}
