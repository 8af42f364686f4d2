//! Synthetic Markov "languages" and calibration-set construction.
//!
//! A language is a first-order Markov source over the content tokens
//! `1..vocab`; token 0 is reserved for BOS and never emitted by the chain.
//! Every calibration sample is `[BOS] + (seq_len − 1)` chain tokens drawn with
//! its own derived seed, so a sample depends only on `(language, base seed,
//! index within the language)` and never on how the languages are mixed.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use rand::distr::{Distribution, weighted::WeightedIndex};
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par;
use crate::seed;
use crate::toymodel::BOS;

pub type Token = u32;

/// Default sample budget of a calibration set.
pub const DEFAULT_BUDGET: usize = 128;
/// Desk-scale sequence length.
pub const DEFAULT_SEQ_LEN: usize = 256;
pub const DEFAULT_VOCAB: usize = 64;
pub const DEFAULT_CONCENTRATION: f64 = 0.1;

const STOCHASTIC_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub language_id: String,
    transition: Matrix,
    initial: Vec<f64>,
    pub seed: u64,
}

impl LanguageSpec {
    /// Validates a hand-built Markov source.
    pub fn new(
        language_id: impl Into<String>,
        transition: Matrix,
        initial: Vec<f64>,
        seed: u64,
    ) -> Result<Self> {
        let v = transition.rows();
        if !transition.is_square() || v < 2 {
            return Err(Error::arg(format!(
                "transition must be square with vocab ≥ 2, got {:?}",
                transition.shape()
            )));
        }
        if initial.len() != v {
            return Err(Error::arg("initial distribution length differs from vocab"));
        }
        let check = |p: &[f64], what: String| -> Result<()> {
            if p.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::arg(format!("{what} has a negative entry")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::arg(format!("{what} sums to {s}, not 1")));
            }
            Ok(())
        };
        for r in 0..v {
            check(transition.row(r), format!("transition row {r}"))?;
        }
        check(&initial, "initial distribution".into())?;
        Ok(Self {
            language_id: language_id.into(),
            transition,
            initial,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.transition.rows()
    }

    pub fn transition(&self) -> &Matrix {
        &self.transition
    }

    pub fn initial(&self) -> &[f64] {
        &self.initial
    }
}

/// Dirichlet(α,…,α) over the content tokens, via normalised Gamma draws.
fn dirichlet_row(vocab: usize, gamma: &Gamma<f64>, rng: &mut impl rand::Rng) -> Vec<f64> {
    loop {
        let mut row = vec![0.0; vocab];
        for p in &mut row[1..] {
            *p = gamma.sample(rng);
        }
        let s: f64 = row.iter().sum();
        if s > 0.0 && s.is_finite() {
            row.iter_mut().for_each(|p| *p /= s);
            return row;
        }
    }
}

/// Random Markov language whose rows are Dirichlet draws; low `concentration`
/// yields peaky, mutually distinct languages.
pub fn make_language(
    language_id: impl Into<String>,
    vocab_size: usize,
    concentration: f64,
    seed: u64,
) -> Result<LanguageSpec> {
    if vocab_size < 2 {
        return Err(Error::arg(format!("vocab_size must be ≥ 2, got {vocab_size}")));
    }
    if !(concentration > 0.0) || !concentration.is_finite() {
        return Err(Error::arg(format!(
            "concentration must be finite and > 0, got {concentration}"
        )));
    }
    let gamma = Gamma::new(concentration, 1.0).map_err(|e| Error::arg(e.to_string()))?;
    let mut rng = seed::rng(seed);
    let initial = dirichlet_row(vocab_size, &gamma, &mut rng);
    let mut data = Vec::with_capacity(vocab_size * vocab_size);
    // After BOS the chain continues exactly as from the start state.
    data.extend_from_slice(&initial);
    for _ in 1..vocab_size {
        data.extend(dirichlet_row(vocab_size, &gamma, &mut rng));
    }
    let transition = Matrix::from_vec(vocab_size, vocab_size, data)?;
    LanguageSpec::new(language_id, transition, initial, seed)
}

fn sampler(p: &[f64]) -> Option<WeightedIndex<f64>> {
    WeightedIndex::new(p).ok()
}

/// Markov-chain sample of `n_tokens` content tokens (no BOS).
pub fn sample_corpus(lang: &LanguageSpec, n_tokens: usize, seed: u64) -> Result<Vec<Token>> {
    if n_tokens == 0 {
        return Err(Error::arg("n_tokens must be ≥ 1"));
    }
    let v = lang.vocab_size();
    let rows: Vec<Option<WeightedIndex<f64>>> =
        (0..v).map(|r| sampler(lang.transition.row(r))).collect();
    let start = sampler(&lang.initial).ok_or_else(|| Error::arg("initial distribution is all zero"))?;
    let mut rng = seed::rng(seed);
    let mut out = Vec::with_capacity(n_tokens);
    let mut cur = start.sample(&mut rng);
    out.push(cur as Token);
    for _ in 1..n_tokens {
        let dist = rows[cur]
            .as_ref()
            .ok_or_else(|| Error::arg(format!("transition row {cur} is all zero")))?;
        cur = dist.sample(&mut rng);
        out.push(cur as Token);
    }
    Ok(out)
}

/// Equal shares of `budget` over `n` languages; the remainder goes to the
/// earliest languages in declared order.
pub fn equal_shares(n: usize, budget: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let (base, rem) = (budget / n, budget % n);
    (0..n).map(|i| base + usize::from(i < rem)).collect()
}

/// Sample `index` of `lang` under base seed `seed`: `[BOS]` followed by
/// `seq_len − 1` chain tokens.
pub fn calibration_sample(
    lang: &LanguageSpec,
    seq_len: usize,
    seed: u64,
    index: usize,
) -> Result<Vec<Token>> {
    if seq_len < 2 {
        return Err(Error::arg("seq_len must be ≥ 2 (BOS plus at least one token)"));
    }
    let mut s = Vec::with_capacity(seq_len);
    s.push(BOS);
    s.extend(sample_corpus(
        lang,
        seq_len - 1,
        seed::mix(seed, &[lang.seed, index as u64]),
    )?);
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationSet {
    pub samples: Vec<Vec<Token>>,
    pub labels: Vec<String>,
    pub seq_len: usize,
    pub budget: usize,
}

impl CalibrationSet {
    /// Assembles a set from already drawn samples, checking the invariants.
    pub fn from_parts(samples: Vec<Vec<Token>>, labels: Vec<String>, seq_len: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("calibration set is empty"));
        }
        if samples.len() != labels.len() {
            return Err(Error::arg("one label per sample required"));
        }
        if let Some(i) = samples.iter().position(|s| s.len() != seq_len) {
            return Err(Error::arg(format!(
                "sample {i} has length {}, expected {seq_len}",
                samples[i].len()
            )));
        }
        Ok(Self {
            budget: samples.len(),
            samples,
            labels,
            seq_len,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_tokens(&self) -> usize {
        self.samples.len() * self.seq_len
    }

    /// Number of samples carrying each label, in first-seen order.
    pub fn label_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for l in &self.labels {
            match out.iter_mut().find(|(k, _)| k == l) {
                Some((_, n)) => *n += 1,
                None => out.push((l.clone(), 1)),
            }
        }
        out
    }
}

/// Mixes `langs` in equal shares up to `budget` samples of length `seq_len`.
pub fn build_calibration_set(
    langs: &[LanguageSpec],
    budget: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibrationSet> {
    if langs.is_empty() {
        return Err(Error::arg("at least one language required"));
    }
    if budget < langs.len() {
        return Err(Error::arg(format!(
            "budget {budget} smaller than the number of languages {}",
            langs.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = equal_shares(langs.len(), budget)
        .into_iter()
        .enumerate()
        .flat_map(|(l, share)| (0..share).map(move |i| (l, i)))
        .collect();
    let samples = par::map_slice(&jobs, |&(l, i)| calibration_sample(&langs[l], seq_len, seed, i))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let labels = jobs
        .iter()
        .map(|&(l, _)| langs[l].language_id.clone())
        .collect();
    CalibrationSet::from_parts(samples, labels, seq_len)
}

/// A run of same-length sequences from one language, as stored in corpus files.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusBlock {
    pub lang: String,
    pub seed: u64,
    pub len: usize,
    /// Additional `key=value` header pairs, in file order.
    pub extra: Vec<(String, String)>,
    pub sequences: Vec<Vec<Token>>,
}

/// Writes blocks in the line format
/// `#lang=<tag> seed=<n> len=<n>[ key=value…]` followed by one
/// space-separated sequence per line.
pub fn write_corpus(mut w: impl Write, blocks: &[CorpusBlock]) -> Result<()> {
    let mut out = String::new();
    for b in blocks {
        if b.lang.is_empty() || b.lang.contains(char::is_whitespace) {
            return Err(Error::arg(format!("invalid language tag {:?}", b.lang)));
        }
        write!(out, "#lang={} seed={} len={}", b.lang, b.seed, b.len).unwrap();
        for (k, v) in &b.extra {
            write!(out, " {k}={v}").unwrap();
        }
        out.push('\n');
        for s in &b.sequences {
            if s.len() != b.len {
                return Err(Error::arg(format!(
                    "sequence of length {} in block declared len={}",
                    s.len(),
                    b.len
                )));
            }
            let mut first = true;
            for t in s {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{t}").unwrap();
            }
            out.push('\n');
        }
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn read_corpus(r: impl BufRead) -> Result<Vec<CorpusBlock>> {
    let bad = |line: usize, msg: String| Error::format("corpus file", format!("line {line}: {msg}"));
    let mut blocks: Vec<CorpusBlock> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let n = i + 1;
        if let Some(header) = line.strip_prefix('#') {
            let (mut lang, mut seed, mut len) = (None, None, None);
            let mut extra = Vec::new();
            for kv in header.split_whitespace() {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| bad(n, format!("malformed header field {kv:?}")))?;
                match k {
                    "lang" => lang = Some(v.to_string()),
                    "seed" => seed = Some(v.parse::<u64>().map_err(|e| bad(n, e.to_string()))?),
                    "len" => len = Some(v.parse::<usize>().map_err(|e| bad(n, e.to_string()))?),
                    _ => extra.push((k.to_string(), v.to_string())),
                }
            }
            blocks.push(CorpusBlock {
                lang: lang.ok_or_else(|| bad(n, "missing lang".into()))?,
                seed: seed.ok_or_else(|| bad(n, "missing seed".into()))?,
                len: len.ok_or_else(|| bad(n, "missing len".into()))?,
                extra,
                sequences: Vec::new(),
            });
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let block = blocks
            .last_mut()
            .ok_or_else(|| bad(n, "sequence before any header".into()))?;
        let seq = line
            .split_whitespace()
            .map(|t| t.parse::<Token>().map_err(|e| bad(n, e.to_string())))
            .collect::<Result<Vec<_>>>()?;
        if seq.len() != block.len {
            return Err(bad(n, format!("{} tokens, header says len={}", seq.len(), block.len)));
        }
        block.sequences.push(seq);
    }
    Ok(blocks)
}
