//! Experiment configuration (TOML) and its content hash.

use std::path::{Path, PathBuf};

use prunelab_core::corpus::{DEFAULT_BUDGET, DEFAULT_CONCENTRATION, DEFAULT_VOCAB};
use prunelab_core::pruner::{Method, SparsitySpec, DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING_FRAC};
use prunelab_core::toymodel::{ActivationSignal, ModelConfig};
use prunelab_core::analysis::DEFAULT_GROUP_FRACTION;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Where artifacts go unless `--out` overrides it. Not part of the hash.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub model: ModelSection,
    pub languages: LanguageSection,
    pub calibration: CalibrationSection,
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub pruning: PruningSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("prunelab-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation_signal: ActivationSignal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSection {
    pub tags: Vec<String>,
    /// One generator seed per tag.
    pub seeds: Vec<u64>,
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
}

fn default_vocab() -> usize {
    DEFAULT_VOCAB
}

fn default_concentration() -> f64 {
    DEFAULT_CONCENTRATION
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationSection {
    #[serde(default = "default_budget")]
    pub budget: usize,
    pub seq_len: usize,
    /// One pruning run per seed for every plan.
    pub seeds: Vec<u64>,
    /// Language mixes, each calibrated in equal shares. Defaults to one
    /// monolingual plan per language.
    #[serde(default)]
    pub plans: Vec<Vec<String>>,
}

fn default_budget() -> usize {
    DEFAULT_BUDGET
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub samples: usize,
    pub seq_len: usize,
    pub seed: u64,
    #[serde(default = "yes")]
    pub perplexity: bool,
    #[serde(default = "yes")]
    pub pruning_error: bool,
    #[serde(default = "yes")]
    pub snr: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruningSection {
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_sparsity")]
    pub sparsity: SparsitySpec,
    #[serde(default = "default_damping")]
    pub damping_frac: f64,
    #[serde(default = "default_block")]
    pub block_size: usize,
}

fn default_sparsity() -> SparsitySpec {
    SparsitySpec::unstructured(0.5)
}

fn default_damping() -> f64 {
    DEFAULT_DAMPING_FRAC
}

fn default_block() -> usize {
    DEFAULT_BLOCK_SIZE
}

impl Default for PruningSection {
    fn default() -> Self {
        Self {
            method: Method::default(),
            sparsity: default_sparsity(),
            damping_frac: default_damping(),
            block_size: default_block(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisSection {
    #[serde(default = "yes")]
    pub lsar: bool,
    /// Subspace rank; `languages − 1` when absent.
    #[serde(default)]
    pub lsar_rank: Option<usize>,
    #[serde(default = "yes")]
    pub iou: bool,
    #[serde(default = "yes")]
    pub lape: bool,
    #[serde(default = "default_fraction")]
    pub lape_group_fraction: f64,
}

fn default_fraction() -> f64 {
    DEFAULT_GROUP_FRACTION
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            lsar: true,
            lsar_rank: None,
            iou: true,
            lape: true,
            lape_group_fraction: default_fraction(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let langs = &self.languages;
        if langs.tags.is_empty() {
            return bad("languages.tags is empty".into());
        }
        if langs.seeds.len() != langs.tags.len() {
            return bad(format!(
                "languages.seeds has {} entries for {} tags",
                langs.seeds.len(),
                langs.tags.len()
            ));
        }
        for (i, t) in langs.tags.iter().enumerate() {
            let ok = !t.is_empty()
                && t.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
            if !ok {
                return bad(format!("language tag {t:?} must be non-empty [A-Za-z0-9_-]"));
            }
            if langs.tags[..i].contains(t) {
                return bad(format!("language tag {t:?} listed twice"));
            }
        }
        if self.calibration.seeds.is_empty() {
            return bad("calibration.seeds needs at least one repeat seed".into());
        }
        let mut seen = self.calibration.seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.calibration.seeds.len() {
            return bad("calibration.seeds contains duplicates".into());
        }
        for plan in self.plans() {
            if plan.is_empty() {
                return bad("empty calibration plan".into());
            }
            if let Some(t) = plan.iter().find(|t| !langs.tags.contains(t)) {
                return bad(format!("calibration plan uses unknown language {t:?}"));
            }
            if self.calibration.budget < plan.len() {
                return bad(format!(
                    "budget {} smaller than plan {}",
                    self.calibration.budget,
                    plan.join("+")
                ));
            }
        }
        let names: Vec<String> = self.plans().iter().map(|p| p.join("+")).collect();
        if let Some(i) = (0..names.len()).find(|&i| names[..i].contains(&names[i])) {
            return bad(format!("calibration plan {} listed twice", names[i]));
        }
        if self.calibration.seq_len < 2 || self.evaluation.seq_len < 2 {
            return bad("sequence lengths must be ≥ 2".into());
        }
        let longest = self.calibration.seq_len.max(self.evaluation.seq_len);
        if longest > self.model.max_seq {
            return bad(format!("sequence length {longest} exceeds model.max_seq {}", self.model.max_seq));
        }
        if self.calibration.seeds.contains(&self.evaluation.seed) {
            return bad(format!(
                "evaluation.seed {} is also a calibration seed; validation would repeat calibration samples",
                self.evaluation.seed
            ));
        }
        if self.evaluation.samples == 0 {
            return bad("evaluation.samples must be ≥ 1".into());
        }
        self.model_config()
            .validate()
            .map_err(|e| CliError::Config(format!("model: {e}")))?;
        if !(langs.concentration > 0.0) || !langs.concentration.is_finite() {
            return bad(format!("concentration {} must be > 0", langs.concentration));
        }
        self.pruning
            .sparsity
            .validate()
            .map_err(|e| CliError::Config(format!("pruning.sparsity: {e}")))?;
        if !(self.pruning.damping_frac >= 0.0) || self.pruning.block_size == 0 {
            return bad("pruning.damping_frac must be ≥ 0 and block_size ≥ 1".into());
        }
        let f = self.analysis.lape_group_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return bad(format!("analysis.lape_group_fraction {f} outside (0, 1]"));
        }
        if let Some(r) = self.analysis.lsar_rank {
            let max = self.lsar_rank_limit();
            if r == 0 || r > max {
                return bad(format!("analysis.lsar_rank {r} outside 1..={max}"));
            }
        }
        Ok(())
    }

    /// Largest usable LSAR rank, also the default.
    pub fn lsar_rank_limit(&self) -> usize {
        let langs = self.languages.tags.len().saturating_sub(1);
        langs.min(self.model.d_model.saturating_sub(1))
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            vocab_size: self.languages.vocab,
            d_model: m.d_model,
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_ffn: m.d_ffn,
            max_seq: m.max_seq,
            seed: m.seed,
            activation_signal: m.activation_signal,
        }
    }

    /// Configured plans, or one monolingual plan per language.
    pub fn plans(&self) -> Vec<Vec<String>> {
        if self.calibration.plans.is_empty() {
            self.languages.tags.iter().map(|t| vec![t.clone()]).collect()
        } else {
            self.calibration.plans.clone()
        }
    }

    /// Shifts every seed by `offset`, giving an independent replicate.
    pub fn with_seed_offset(mut self, offset: u64) -> Self {
        let shift = |s: &mut u64| *s = s.wrapping_add(offset);
        shift(&mut self.model.seed);
        self.languages.seeds.iter_mut().for_each(shift);
        self.calibration.seeds.iter_mut().for_each(shift);
        shift(&mut self.evaluation.seed);
        self
    }

    /// Hex SHA-256 of everything that determines the artifacts.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.out_dir = PathBuf::new();
        let canonical = serde_json::to_vec(&identity).expect("config serializes");
        let digest = Sha256::digest(&canonical);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}
