//! Perplexity, normalized pruning error and signal-to-noise ratio.
//!
//! Pruning error and SNR compare the residual stream after every block of a
//! full and a pruned model on identical inputs. Both traces are divided by the
//! full model's mean per-token hidden-state norm of that layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, Matrix};
use crate::par;
use crate::toymodel::{negative_log_likelihood, HiddenTrace, ToyModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetric {
    pub layer: usize,
    pub value: f64,
}

/// `exp` of the mean next-token NLL over every position of every sequence.
pub fn perplexity(model: &ToyModel, corpus: &[Vec<u32>]) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::arg("evaluation corpus is empty"));
    }
    let nll = par::map_slice(corpus, |s| negative_log_likelihood(model, s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let (sum, n) = nll
        .iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v.iter().sum::<f64>(), n + v.len()));
    Ok((sum / n as f64).exp())
}

fn check_pair(full: &HiddenTrace, pruned: &HiddenTrace) -> Result<()> {
    if full.hidden.is_empty() {
        return Err(Error::arg("traces hold no hidden states"));
    }
    if full.hidden.len() != pruned.hidden.len() {
        return Err(Error::arg(format!(
            "layer counts differ: {} vs {}",
            full.hidden.len(),
            pruned.hidden.len()
        )));
    }
    for (l, (a, b)) in full.hidden.iter().zip(&pruned.hidden).enumerate() {
        if a.shape() != b.shape() {
            return Err(Error::arg(format!(
                "layer {l} shapes differ: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Mean per-token Euclidean norm.
fn mean_norm(h: &Matrix) -> f64 {
    (0..h.rows()).map(|r| norm2(h.row(r))).sum::<f64>() / h.rows() as f64
}

/// Normalized signal power and error power of one layer.
fn layer_powers(layer: usize, h: &Matrix, h_tilde: &Matrix) -> Result<(f64, f64)> {
    let mu = mean_norm(h);
    if !(mu > 0.0) {
        return Err(Error::Degenerate(format!(
            "layer {layer} of the full trace has zero mean norm"
        )));
    }
    let nd = (h.rows() * h.cols()) as f64;
    let (mut signal, mut error) = (0.0, 0.0);
    for (a, b) in h.as_slice().iter().zip(h_tilde.as_slice()) {
        signal += (a / mu).powi(2);
        error += ((a - b) / mu).powi(2);
    }
    Ok((signal / nd, error / nd))
}

/// Per-layer mean squared normalized deviation of `pruned` from `full`.
pub fn pruning_error(full: &HiddenTrace, pruned: &HiddenTrace) -> Result<Vec<LayerMetric>> {
    check_pair(full, pruned)?;
    par::try_map_range::<_, Error, _>(full.hidden.len(), |layer| {
        let (_, value) = layer_powers(layer, &full.hidden[layer], &pruned.hidden[layer])?;
        Ok(LayerMetric { layer, value })
    })
}

/// Unweighted mean of per-layer values.
pub fn mean_value(metrics: &[LayerMetric]) -> Option<f64> {
    if metrics.is_empty() {
        return None;
    }
    Some(metrics.iter().map(|m| m.value).sum::<f64>() / metrics.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnrReport {
    /// Per-layer SNR in dB; `+inf` where the layer is reproduced exactly.
    pub layers: Vec<LayerMetric>,
    /// Mean over the finite layers, `None` when every layer is exact.
    pub average: Option<f64>,
    pub infinite_layers: Vec<usize>,
}

pub fn snr(full: &HiddenTrace, pruned: &HiddenTrace) -> Result<SnrReport> {
    check_pair(full, pruned)?;
    let layers = par::try_map_range::<_, Error, _>(full.hidden.len(), |layer| {
        let (signal, error) = layer_powers(layer, &full.hidden[layer], &pruned.hidden[layer])?;
        let value = if error == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (signal / error).log10()
        };
        Ok(LayerMetric { layer, value })
    })?;
    let infinite_layers: Vec<usize> = layers
        .iter()
        .filter(|m| m.value.is_infinite())
        .map(|m| m.layer)
        .collect();
    if !infinite_layers.is_empty() {
        log::warn!("SNR is infinite for layers {infinite_layers:?}; excluded from the average");
    }
    let finite: Vec<LayerMetric> = layers.iter().copied().filter(|m| m.value.is_finite()).collect();
    Ok(SnrReport {
        average: mean_value(&finite),
        layers,
        infinite_layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use crate::toymodel::{CaptureFlags, ModelConfig};
    use rand::Rng;

    fn trace(hidden: Vec<Matrix>) -> HiddenTrace {
        let n = hidden[0].rows();
        HiddenTrace {
            hidden,
            active: Vec::new(),
            special: vec![false; n],
        }
    }

    fn random_trace(layers: usize, n: usize, d: usize, s: u64) -> HiddenTrace {
        let mut rng = seed::rng(s);
        trace(
            (0..layers)
                .map(|_| Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0)))
                .collect(),
        )
    }

    fn map_trace(t: &HiddenTrace, f: impl Fn(f64) -> f64) -> HiddenTrace {
        trace(t.hidden.iter().map(|h| h.map(&f)).collect())
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 8,
            max_seq: 10,
            seed: 5,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn uniform_model_has_vocab_perplexity() {
        let model = ToyModel::zeros(tiny_config()).unwrap();
        let corpus = vec![vec![0, 3, 5, 7, 1], vec![0, 11, 2]];
        let ppl = perplexity(&model, &corpus).unwrap();
        assert!((ppl / 12.0 - 1.0).abs() < 1e-6);
        assert!(perplexity(&model, &[]).is_err());
        assert!(perplexity(&model, &[vec![0]]).is_err());
    }

    #[test]
    fn perplexity_ignores_duplication_and_is_at_least_one() {
        let model = ToyModel::init(tiny_config()).unwrap();
        let corpus = vec![vec![0, 3, 5, 7, 1, 4], vec![0, 11, 2, 2]];
        let doubled: Vec<Vec<u32>> = corpus.iter().flat_map(|s| [s.clone(), s.clone()]).collect();
        let a = perplexity(&model, &corpus).unwrap();
        let b = perplexity(&model, &doubled).unwrap();
        assert!(a >= 1.0);
        assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn perplexity_matches_direct_softmax() {
        let model = ToyModel::init(tiny_config()).unwrap();
        let seq = vec![0u32, 4, 9, 1, 1, 6];
        let (logits, _) = model.forward(&seq, CaptureFlags::NONE).unwrap();
        let mut nll = 0.0;
        for p in 0..seq.len() - 1 {
            let z: f64 = logits.row(p).iter().map(|v| v.exp()).sum();
            nll -= (logits[(p, seq[p + 1] as usize)].exp() / z).ln();
        }
        let want = (nll / (seq.len() - 1) as f64).exp();
        assert!((perplexity(&model, &[seq]).unwrap() - want).abs() < 1e-10 * want);
    }

    #[test]
    fn identical_traces_have_zero_error_and_infinite_snr() {
        let t = random_trace(3, 5, 4, 1);
        assert!(pruning_error(&t, &t).unwrap().iter().all(|m| m.value == 0.0));
        let s = snr(&t, &t).unwrap();
        assert_eq!(s.infinite_layers, vec![0, 1, 2]);
        assert_eq!(s.average, None);
    }

    #[test]
    fn single_coordinate_perturbation() {
        let t = random_trace(1, 6, 4, 2);
        let h = &t.hidden[0];
        let mu = (0..6).map(|r| norm2(h.row(r))).sum::<f64>() / 6.0;
        let eps = 0.3;
        let mut p = h.clone();
        p[(2, 1)] += eps * mu;
        let e = pruning_error(&t, &trace(vec![p])).unwrap()[0].value;
        assert!((e - eps * eps / 24.0).abs() < 1e-15);
    }

    #[test]
    fn scalar_case() {
        let full = trace(vec![Matrix::from_rows(&[vec![2.0]]).unwrap()]);
        let pruned = trace(vec![Matrix::from_rows(&[vec![1.0]]).unwrap()]);
        assert_eq!(pruning_error(&full, &pruned).unwrap()[0].value, 0.25);
    }

    #[test]
    fn proportional_perturbation_snr() {
        let t = random_trace(4, 7, 5, 3);
        let at = |eps: f64| snr(&t, &map_trace(&t, |v| v * (1.0 + eps))).unwrap();
        let s = at(0.01);
        for m in &s.layers {
            assert!((m.value - 40.0).abs() < 1e-9);
        }
        assert!((s.average.unwrap() - 40.0).abs() < 1e-9);
        let gain = at(0.005).average.unwrap() - s.average.unwrap();
        assert!((gain - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn error_is_scale_invariant() {
        let a = random_trace(2, 5, 3, 4);
        let b = random_trace(2, 5, 3, 5);
        let e1 = pruning_error(&a, &b).unwrap();
        let e2 = pruning_error(&map_trace(&a, |v| 3.5 * v), &map_trace(&b, |v| 3.5 * v)).unwrap();
        for (x, y) in e1.iter().zip(&e2) {
            assert!((x.value - y.value).abs() <= 1e-12 * x.value);
        }
    }

    #[test]
    fn shared_normalization_makes_error_symmetric() {
        let a = random_trace(1, 5, 3, 6);
        let b = map_trace(&a, |v| v + 0.1);
        // normalising by the same μ, the squared difference is symmetric
        let e_ab = pruning_error(&a, &b).unwrap()[0].value;
        let mu_a = mean_norm(&a.hidden[0]);
        let mu_b = mean_norm(&b.hidden[0]);
        let e_ba = pruning_error(&b, &a).unwrap()[0].value;
        assert!((e_ab * mu_a * mu_a - e_ba * mu_b * mu_b).abs() < 1e-12);
    }

    #[test]
    fn degenerate_and_mismatched_inputs() {
        let z = trace(vec![Matrix::zeros(3, 2)]);
        assert!(matches!(pruning_error(&z, &z), Err(Error::Degenerate(_))));
        let a = random_trace(2, 3, 2, 0);
        let b = random_trace(1, 3, 2, 0);
        assert!(matches!(pruning_error(&a, &b), Err(Error::Argument(_))));
        let c = random_trace(2, 4, 2, 0);
        assert!(matches!(snr(&a, &c), Err(Error::Argument(_))));
    }
}
