use serde::{Deserialize, Serialize};

use super::{ActivationSignal, InputSite, ToyModel, RMS_EPS};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// Beginning-of-sequence token id, the only special token.
pub const BOS: u32 = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaptureFlags {
    pub hidden: bool,
    pub activations: bool,
}

impl CaptureFlags {
    pub const NONE: Self = Self {
        hidden: false,
        activations: false,
    };
    pub const ALL: Self = Self {
        hidden: true,
        activations: true,
    };
}

/// Boolean `tokens × d_ffn` table of FFN activation events.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivationBits {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ActivationBits {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let bits = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        Self { rows, cols, bits }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, token: usize, neuron: usize) -> bool {
        self.bits[token * self.cols + neuron]
    }

    /// Number of positions at which each neuron fired.
    pub fn column_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.cols];
        for row in self.bits.chunks(self.cols.max(1)) {
            for (c, &b) in counts.iter_mut().zip(row) {
                *c += b as usize;
            }
        }
        counts
    }
}

/// Captured per-layer state of one forward pass (or a concatenation of several).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    /// Residual stream after each layer, `tokens × d_model`.
    pub hidden: Vec<Matrix>,
    /// FFN activation events per layer, `tokens × d_ffn`.
    pub active: Vec<ActivationBits>,
    /// Whether each position holds a special token.
    pub special: Vec<bool>,
}

impl HiddenTrace {
    pub fn n_tokens(&self) -> usize {
        self.special.len()
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len().max(self.active.len())
    }

    /// Stacks traces token-wise, e.g. all sequences of an evaluation corpus.
    pub fn concat(traces: &[HiddenTrace]) -> Result<HiddenTrace> {
        let first = traces
            .first()
            .ok_or_else(|| Error::arg("cannot concatenate zero traces"))?;
        let (nh, na) = (first.hidden.len(), first.active.len());
        if traces.iter().any(|t| t.hidden.len() != nh || t.active.len() != na) {
            return Err(Error::arg("traces captured different layer sets"));
        }
        let hidden = (0..nh)
            .map(|l| Matrix::vstack(&traces.iter().map(|t| &t.hidden[l]).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let active = (0..na)
            .map(|l| {
                let cols = first.active[l].cols;
                if traces.iter().any(|t| t.active[l].cols != cols) {
                    return Err(Error::arg("activation widths differ"));
                }
                let bits: Vec<bool> = traces
                    .iter()
                    .flat_map(|t| t.active[l].bits.iter().copied())
                    .collect();
                Ok(ActivationBits {
                    rows: bits.len() / cols.max(1),
                    cols,
                    bits,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let special = traces.iter().flat_map(|t| t.special.iter().copied()).collect();
        Ok(HiddenTrace {
            hidden,
            active,
            special,
        })
    }
}

/// Inputs seen by the linear maps of one block, one row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerCapture {
    pub attn_in: Matrix,
    pub attn_mix: Matrix,
    pub ffn_in: Matrix,
    pub ffn_hidden: Matrix,
}

impl LayerCapture {
    pub fn site(&self, site: InputSite) -> &Matrix {
        match site {
            InputSite::AttnIn => &self.attn_in,
            InputSite::AttnMix => &self.attn_mix,
            InputSite::FfnIn => &self.ffn_in,
            InputSite::FfnHidden => &self.ffn_hidden,
        }
    }
}

/// Result of running one block.
#[derive(Clone, Debug)]
pub struct LayerOutput {
    pub residual: Matrix,
    pub active: Option<ActivationBits>,
    pub inputs: Option<LayerCapture>,
}

pub(crate) fn rms_norm(x: &Matrix, scale: &[f64]) -> Matrix {
    let d = x.cols() as f64;
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let inv = 1.0 / (dot(row, row) / d + RMS_EPS).sqrt();
        row.iter_mut().zip(scale).for_each(|(v, g)| *v *= inv * g);
    }
    out
}

#[inline]
pub(crate) fn silu(z: f64) -> f64 {
    z / (1.0 + (-z).exp())
}

impl ToyModel {
    /// Token plus position embeddings, `tokens × d_model`.
    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::arg("empty token sequence"));
        }
        if tokens.len() > c.max_seq {
            return Err(Error::arg(format!(
                "sequence length {} exceeds max_seq {}",
                tokens.len(),
                c.max_seq
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::arg(format!(
                "token id {t} out of range for vocab {}",
                c.vocab_size
            )));
        }
        let mut x = Matrix::zeros(tokens.len(), c.d_model);
        for (p, &t) in tokens.iter().enumerate() {
            let te = self.token_embedding.row(t as usize);
            let pe = self.position_embedding.row(p);
            for ((o, a), b) in x.row_mut(p).iter_mut().zip(te).zip(pe) {
                *o = a + b;
            }
        }
        Ok(x)
    }

    /// Runs block `layer` on the residual stream `x` (`tokens × d_model`).
    pub fn run_layer(
        &self,
        layer: usize,
        x: &Matrix,
        want_bits: bool,
        want_inputs: bool,
    ) -> LayerOutput {
        let l = &self.layers[layer];
        let (t, d) = x.shape();
        let hd = self.config.head_dim();
        let scale = 1.0 / (hd as f64).sqrt();

        let attn_in = rms_norm(x, &l.attn_norm);
        let q = attn_in.matmul_transb(&l.wq).expect("shape");
        let k = attn_in.matmul_transb(&l.wk).expect("shape");
        let v = attn_in.matmul_transb(&l.wv).expect("shape");

        let mut mix = Matrix::zeros(t, d);
        let mut weights = vec![0.0; t];
        for h in 0..self.config.n_heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let qi = &q.row(i)[cols.clone()];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let s = dot(qi, &k.row(j)[cols.clone()]) * scale;
                    weights[j] = s;
                    max = max.max(s);
                }
                let mut z = 0.0;
                for w in &mut weights[..=i] {
                    *w = (*w - max).exp();
                    z += *w;
                }
                let out = &mut mix.row_mut(i)[cols.clone()];
                for j in 0..=i {
                    let p = weights[j] / z;
                    for (o, vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let attn_out = mix.matmul_transb(&l.wo).expect("shape");
        let mid = x.add(&attn_out).expect("shape");

        let ffn_in = rms_norm(&mid, &l.ffn_norm);
        let gate = ffn_in.matmul_transb(&l.w_gate).expect("shape");
        let up = ffn_in.matmul_transb(&l.w_up).expect("shape");
        let hidden = Matrix::from_fn(t, self.config.d_ffn, |r, c| {
            silu(gate[(r, c)]) * up[(r, c)]
        });
        let active = want_bits.then(|| match self.config.activation_signal {
            ActivationSignal::Up => {
                ActivationBits::from_fn(t, self.config.d_ffn, |r, c| silu(up[(r, c)]) > 0.0)
            }
            ActivationSignal::Gated => {
                ActivationBits::from_fn(t, self.config.d_ffn, |r, c| hidden[(r, c)] > 0.0)
            }
        });
        let down = hidden.matmul_transb(&l.w_down).expect("shape");
        let residual = mid.add(&down).expect("shape");

        let inputs = want_inputs.then(|| LayerCapture {
            attn_in,
            attn_mix: mix,
            ffn_in,
            ffn_hidden: hidden,
        });
        LayerOutput {
            residual,
            active,
            inputs,
        }
    }

    /// Final norm and tied unembedding, `tokens × vocab`.
    pub fn head(&self, x: &Matrix) -> Matrix {
        rms_norm(x, &self.final_norm)
            .matmul_transb(&self.token_embedding)
            .expect("shape")
    }

    /// Causal forward pass returning logits and the requested captures.
    pub fn forward(&self, tokens: &[u32], capture: CaptureFlags) -> Result<(Matrix, HiddenTrace)> {
        let mut x = self.embed(tokens)?;
        let mut trace = HiddenTrace {
            hidden: Vec::new(),
            active: Vec::new(),
            special: tokens.iter().map(|&t| t == BOS).collect(),
        };
        for layer in 0..self.layers.len() {
            let out = self.run_layer(layer, &x, capture.activations, false);
            x = out.residual;
            if capture.hidden {
                trace.hidden.push(x.clone());
            }
            if let Some(bits) = out.active {
                trace.active.push(bits);
            }
        }
        Ok((self.head(&x), trace))
    }
}

/// Mean hidden state of `layer` over non-special positions.
pub fn sentence_embedding(trace: &HiddenTrace, layer: usize) -> Result<Vec<f64>> {
    let h = trace.hidden.get(layer).ok_or_else(|| {
        Error::arg(format!(
            "layer {layer} not captured ({} layers)",
            trace.hidden.len()
        ))
    })?;
    let mut sum = vec![0.0; h.cols()];
    let mut n = 0usize;
    for (r, &special) in trace.special.iter().enumerate() {
        if special {
            continue;
        }
        n += 1;
        sum.iter_mut().zip(h.row(r)).for_each(|(s, v)| *s += v);
    }
    if n == 0 {
        return Err(Error::arg("every position holds a special token"));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

/// Natural-log NLL of each next token, length `tokens.len() − 1`.
pub fn negative_log_likelihood(model: &ToyModel, tokens: &[u32]) -> Result<Vec<f64>> {
    if tokens.len() < 2 {
        return Err(Error::arg("need at least two tokens for next-token likelihood"));
    }
    let (logits, _) = model.forward(tokens, CaptureFlags::NONE)?;
    Ok((0..tokens.len() - 1)
        .map(|p| {
            let row = logits.row(p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            (lse - row[tokens[p + 1] as usize]).max(0.0)
        })
        .collect())
}
