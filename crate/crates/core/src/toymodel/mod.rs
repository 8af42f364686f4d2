//! A tiny pre-norm decoder-only transformer.
//!
//! Linear weights are stored output-major (`out × in`) so that a layer maps a
//! row of activations `x` to `x · Wᵀ`. This is also the orientation the
//! pruners work in: one row per output neuron, one column per input feature.

mod forward;
mod io;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seed;

pub use forward::{
    negative_log_likelihood, sentence_embedding, ActivationBits, CaptureFlags, HiddenTrace,
    LayerCapture, LayerOutput, BOS,
};
pub use io::{read_model, write_model, MODEL_MAGIC, MODEL_VERSION};

/// Standard deviation of the Gaussian weight initialisation.
pub const INIT_STD: f64 = 0.02;
pub const RMS_EPS: f64 = 1e-6;

/// Which quantity decides whether an FFN neuron counts as active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationSignal {
    /// `SiLU(x·W_up)_j > 0`.
    #[default]
    Up,
    /// `(SiLU(x·W_gate) ⊙ x·W_up)_j > 0`, the value fed to the down projection.
    Gated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub seed: u64,
    #[serde(default)]
    pub activation_signal: ActivationSignal,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ffn: 64,
            max_seq: 256,
            seed: 0,
            activation_signal: ActivationSignal::Up,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ffn", self.d_ffn),
            ("max_seq", self.max_seq),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be ≥ 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::arg(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_ffn < self.d_model {
            return Err(Error::arg(format!(
                "d_ffn {} smaller than d_model {}",
                self.d_ffn, self.d_model
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// The seven prunable linear maps of a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinearKind {
    Q,
    K,
    V,
    AttnOut,
    FfnUp,
    FfnGate,
    FfnDown,
}

/// Where a linear map reads its input from inside a block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputSite {
    /// Normalised residual entering attention (shared by q, k, v).
    AttnIn,
    /// Concatenated head outputs (attention output projection).
    AttnMix,
    /// Normalised residual entering the FFN (shared by up and gate).
    FfnIn,
    /// Gated FFN hidden activation (down projection).
    FfnHidden,
}

impl LinearKind {
    pub const ALL: [LinearKind; 7] = [
        LinearKind::Q,
        LinearKind::K,
        LinearKind::V,
        LinearKind::AttnOut,
        LinearKind::FfnUp,
        LinearKind::FfnGate,
        LinearKind::FfnDown,
    ];

    /// Sub-component name used in reports and mask files.
    pub fn name(self) -> &'static str {
        match self {
            LinearKind::Q => "q",
            LinearKind::K => "k",
            LinearKind::V => "v",
            LinearKind::AttnOut => "attn.out",
            LinearKind::FfnUp => "ffn.up",
            LinearKind::FfnGate => "ffn.gate",
            LinearKind::FfnDown => "ffn.down",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    pub fn input_site(self) -> InputSite {
        match self {
            LinearKind::Q | LinearKind::K | LinearKind::V => InputSite::AttnIn,
            LinearKind::AttnOut => InputSite::AttnMix,
            LinearKind::FfnUp | LinearKind::FfnGate => InputSite::FfnIn,
            LinearKind::FfnDown => InputSite::FfnHidden,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    /// `d_ffn × d_model`
    pub w_gate: Matrix,
    /// `d_ffn × d_model`
    pub w_up: Matrix,
    /// `d_model × d_ffn`
    pub w_down: Matrix,
}

impl Layer {
    pub fn linear(&self, kind: LinearKind) -> &Matrix {
        match kind {
            LinearKind::Q => &self.wq,
            LinearKind::K => &self.wk,
            LinearKind::V => &self.wv,
            LinearKind::AttnOut => &self.wo,
            LinearKind::FfnUp => &self.w_up,
            LinearKind::FfnGate => &self.w_gate,
            LinearKind::FfnDown => &self.w_down,
        }
    }

    pub fn linear_mut(&mut self, kind: LinearKind) -> &mut Matrix {
        match kind {
            LinearKind::Q => &mut self.wq,
            LinearKind::K => &mut self.wk,
            LinearKind::V => &mut self.wv,
            LinearKind::AttnOut => &mut self.wo,
            LinearKind::FfnUp => &mut self.w_up,
            LinearKind::FfnGate => &mut self.w_gate,
            LinearKind::FfnDown => &mut self.w_down,
        }
    }
}

/// Transformer weights. The output projection is tied to `token_embedding`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub token_embedding: Matrix,
    /// `max_seq × d_model`, learned absolute positions
    pub position_embedding: Matrix,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f64>,
}

impl ToyModel {
    /// Draws every weight matrix i.i.d. from `N(0, 0.02²)`; norm scales start at one.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut gaussian = |rows: usize, cols: usize| {
            let data = (0..rows * cols).map(|_| normal.sample(&mut rng)).collect();
            Matrix::from_vec(rows, cols, data).expect("finite draws")
        };
        let (d, f) = (config.d_model, config.d_ffn);
        let token_embedding = gaussian(config.vocab_size, d);
        let position_embedding = gaussian(config.max_seq, d);
        let layers = (0..config.n_layers)
            .map(|_| Layer {
                attn_norm: vec![1.0; d],
                wq: gaussian(d, d),
                wk: gaussian(d, d),
                wv: gaussian(d, d),
                wo: gaussian(d, d),
                ffn_norm: vec![1.0; d],
                w_gate: gaussian(f, d),
                w_up: gaussian(f, d),
                w_down: gaussian(d, f),
            })
            .collect();
        Ok(Self {
            token_embedding,
            position_embedding,
            layers,
            final_norm: vec![1.0; d],
            config,
        })
    }

    /// Same shapes as [`ToyModel::init`], every weight zero and every norm scale one.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut m = Self::init(config)?;
        m.for_each_matrix_mut(|mat| mat.as_mut_slice().fill(0.0));
        Ok(m)
    }

    pub fn for_each_matrix_mut(&mut self, mut f: impl FnMut(&mut Matrix)) {
        f(&mut self.token_embedding);
        f(&mut self.position_embedding);
        for layer in &mut self.layers {
            for kind in LinearKind::ALL {
                f(layer.linear_mut(kind));
            }
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// `(layer, kind)` for every prunable matrix, in file order.
    pub fn prunable(&self) -> impl Iterator<Item = (usize, LinearKind)> + '_ {
        (0..self.layers.len()).flat_map(|l| LinearKind::ALL.into_iter().map(move |k| (l, k)))
    }

    /// Fully-qualified matrix name, e.g. `layers.2.ffn.up`.
    pub fn matrix_name(layer: usize, kind: LinearKind) -> String {
        format!("layers.{layer}.{}", kind.name())
    }

    /// Checks shapes and finiteness against the config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, f) = (c.d_model, c.d_ffn);
        let shape = |m: &Matrix, want: (usize, usize), what: &str| -> Result<()> {
            if m.shape() != want {
                return Err(Error::arg(format!("{what}: shape {:?}, expected {want:?}", m.shape())));
            }
            if m.as_slice().iter().any(|v| !v.is_finite()) {
                return Err(Error::arg(format!("{what}: non-finite weight")));
            }
            Ok(())
        };
        shape(&self.token_embedding, (c.vocab_size, d), "token_embedding")?;
        shape(&self.position_embedding, (c.max_seq, d), "position_embedding")?;
        if self.layers.len() != c.n_layers {
            return Err(Error::arg("layer count does not match config"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for kind in LinearKind::ALL {
                let want = match kind {
                    LinearKind::FfnUp | LinearKind::FfnGate => (f, d),
                    LinearKind::FfnDown => (d, f),
                    _ => (d, d),
                };
                shape(l.linear(kind), want, &Self::matrix_name(i, kind))?;
            }
            if l.attn_norm.len() != d || l.ffn_norm.len() != d {
                return Err(Error::arg(format!("layer {i}: norm length mismatch")));
            }
        }
        if self.final_norm.len() != d {
            return Err(Error::arg("final_norm length mismatch"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let c = ModelConfig::default();
        assert_eq!(ToyModel::init(c.clone()).unwrap(), ToyModel::init(c).unwrap());
    }

    #[test]
    fn head_dim() {
        let c = ModelConfig {
            d_model: 8,
            n_heads: 2,
            d_ffn: 16,
            ..ModelConfig::default()
        };
        assert_eq!(c.head_dim(), 4);
    }

    #[test]
    fn seeds_differ() {
        let a = ToyModel::init(ModelConfig { seed: 1, ..Default::default() }).unwrap();
        let b = ToyModel::init(ModelConfig { seed: 2, ..Default::default() }).unwrap();
        let dist = a.layers[0].wq.sub(&b.layers[0].wq).unwrap().frobenius_norm();
        assert!(dist > 0.0);
    }

    #[test]
    fn init_statistics() {
        let m = ToyModel::init(ModelConfig::default()).unwrap();
        let w = m.layers[1].w_up.as_slice();
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 0.003);
        assert!((std - INIT_STD).abs() < 0.002, "{std}");
        m.validate().unwrap();
    }

    #[test]
    fn config_invariants() {
        let bad = [
            ModelConfig { d_model: 10, n_heads: 4, ..Default::default() },
            ModelConfig { d_ffn: 8, ..Default::default() },
            ModelConfig { vocab_size: 0, ..Default::default() },
        ];
        for c in bad {
            assert!(matches!(ToyModel::init(c), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn names_roundtrip() {
        for k in LinearKind::ALL {
            assert_eq!(LinearKind::from_name(k.name()), Some(k));
        }
        assert_eq!(ToyModel::matrix_name(3, LinearKind::AttnOut), "layers.3.attn.out");
    }
}
