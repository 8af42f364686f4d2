use serde::{Deserialize, Serialize};

use super::sparsegpt::sparsegpt_from_gram;
use super::{
    apply_mask, prune_magnitude, select_mask, Method, Provenance, PruningMask, SparsitySpec,
    DEFAULT_BLOCK_SIZE, DEFAULT_DAMPING_FRAC,
};
use crate::corpus::CalibrationSet;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::par;
use crate::toymodel::{InputSite, LinearKind, ToyModel};

const SITES: [InputSite; 4] = [
    InputSite::AttnIn,
    InputSite::AttnMix,
    InputSite::FfnIn,
    InputSite::FfnHidden,
];

fn site_index(site: InputSite) -> usize {
    SITES.iter().position(|&s| s == site).expect("known site")
}

/// Inputs of every prunable matrix, `in_features × tokens`, tokens ordered by
/// sample then position.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerInputs {
    layers: Vec<[Matrix; 4]>,
}

impl LayerInputs {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn get(&self, layer: usize, kind: LinearKind) -> &Matrix {
        &self.layers[layer][site_index(kind.input_site())]
    }
}

fn check_calibration(calib: &CalibrationSet) -> Result<()> {
    if calib.is_empty() {
        return Err(Error::arg("calibration set is empty"));
    }
    Ok(())
}

/// Runs the unpruned model over every calibration sample and records the
/// input of each linear map.
pub fn collect_layer_inputs(model: &ToyModel, calib: &CalibrationSet) -> Result<LayerInputs> {
    check_calibration(calib)?;
    let mut xs = par::map_slice(&calib.samples, |s| model.embed(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let mut layers = Vec::with_capacity(model.n_layers());
    for layer in 0..model.n_layers() {
        let outs = par::map_slice(&xs, |x| model.run_layer(layer, x, false, true));
        let mut parts: [Vec<Matrix>; 4] = Default::default();
        xs = outs
            .into_iter()
            .map(|o| {
                let cap = o.inputs.expect("inputs requested");
                for (i, &site) in SITES.iter().enumerate() {
                    parts[i].push(cap.site(site).clone());
                }
                o.residual
            })
            .collect();
        let stacked = parts.map(|p| {
            let refs: Vec<&Matrix> = p.iter().collect();
            Matrix::vstack(&refs).expect("equal widths").transpose()
        });
        layers.push(stacked);
    }
    Ok(LayerInputs { layers })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub method: Method,
    pub spec: SparsitySpec,
    pub damping_frac: f64,
    pub block_size: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            method: Method::Wanda,
            spec: SparsitySpec::unstructured(0.5),
            damping_frac: DEFAULT_DAMPING_FRAC,
            block_size: DEFAULT_BLOCK_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedMask {
    pub layer: usize,
    pub kind: LinearKind,
    pub mask: PruningMask,
}

impl NamedMask {
    pub fn name(&self) -> String {
        ToyModel::matrix_name(self.layer, self.kind)
    }
}

/// Masks of one pruning run in prunable-matrix order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskBundle {
    pub masks: Vec<NamedMask>,
}

impl MaskBundle {
    pub fn get(&self, layer: usize, kind: LinearKind) -> Option<&PruningMask> {
        self.masks
            .iter()
            .find(|m| m.layer == layer && m.kind == kind)
            .map(|m| &m.mask)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedMask> {
        self.masks.iter()
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Checks every mask for exact per-group sparsity.
    pub fn check_exact(&self) -> Result<()> {
        for m in &self.masks {
            m.mask
                .check_exact()
                .map_err(|e| Error::numeric(format!("{}: {e}", m.name())))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct PrunedModel {
    pub model: ToyModel,
    pub masks: MaskBundle,
}

/// Sum of `cᵀ·c` over per-sample captures, added in sample order.
fn gram(parts: &[Matrix]) -> Matrix {
    let grams = par::map_slice(parts, |c| c.transpose().matmul(c).expect("shape"));
    let mut it = grams.into_iter();
    let mut acc = it.next().expect("non-empty");
    for g in it {
        acc.as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .for_each(|(a, b)| *a += b);
    }
    acc
}

/// Prunes every attention and FFN matrix of `model`.
///
/// Calibration-driven methods walk the blocks in order: the inputs of block
/// `k` are recorded with blocks `< k` already pruned, and all seven matrices
/// of a block are pruned from those inputs before moving on.
pub fn prune_model(
    model: &ToyModel,
    calib: &CalibrationSet,
    cfg: &PruneConfig,
    seed: u64,
) -> Result<PrunedModel> {
    cfg.spec.validate()?;
    let provenance = Provenance {
        languages: calib.label_counts().into_iter().map(|(l, _)| l).collect(),
        seed,
        tag: String::new(),
    };
    let mut pruned = model.clone();
    let mut masks = Vec::new();

    if cfg.method == Method::Magnitude {
        for layer in 0..model.n_layers() {
            for kind in LinearKind::ALL {
                let w = pruned.layers[layer].linear(kind);
                let mut mask = prune_magnitude(w, &cfg.spec)?;
                mask.provenance = provenance.clone();
                *pruned.layers[layer].linear_mut(kind) = apply_mask(w, &mask)?;
                masks.push(NamedMask { layer, kind, mask });
            }
        }
        return Ok(PrunedModel {
            model: pruned,
            masks: MaskBundle { masks },
        });
    }

    check_calibration(calib)?;
    let mut xs = par::map_slice(&calib.samples, |s| pruned.embed(s))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    for layer in 0..model.n_layers() {
        let caps: Vec<_> = par::map_slice(&xs, |x| {
            pruned.run_layer(layer, x, false, true).inputs.expect("inputs requested")
        });
        let grams: Vec<Matrix> = SITES
            .iter()
            .map(|&site| {
                let parts: Vec<Matrix> = caps.iter().map(|c| c.site(site).clone()).collect();
                gram(&parts)
            })
            .collect();
        drop(caps);

        let block = &pruned.layers[layer];
        let results = par::try_map_range(LinearKind::ALL.len(), |i| {
            let kind = LinearKind::ALL[i];
            let w = block.linear(kind);
            let g = &grams[site_index(kind.input_site())];
            match cfg.method {
                Method::Wanda => {
                    let norms: Vec<f64> = g.diag().into_iter().map(f64::sqrt).collect();
                    let scores = Matrix::from_fn(w.rows(), w.cols(), |r, c| w[(r, c)].abs() * norms[c]);
                    cfg.spec.validate_for(w.rows(), w.cols())?;
                    let mask = PruningMask {
                        keep: select_mask(&scores, &cfg.spec)?,
                        spec: cfg.spec,
                        provenance: Provenance::default(),
                    };
                    let updated = apply_mask(w, &mask)?;
                    Ok((mask, updated))
                }
                Method::SparseGpt => {
                    sparsegpt_from_gram(w, g, &cfg.spec, cfg.damping_frac, cfg.block_size)
                        .map_err(|e| match e {
                            Error::Numeric(msg) => Error::Numeric(format!(
                                "{}: {msg}",
                                ToyModel::matrix_name(layer, kind)
                            )),
                            other => other,
                        })
                }
                Method::Magnitude => unreachable!("handled above"),
            }
        })?;
        for (kind, (mut mask, updated)) in LinearKind::ALL.into_iter().zip(results) {
            mask.provenance = provenance.clone();
            *pruned.layers[layer].linear_mut(kind) = updated;
            masks.push(NamedMask { layer, kind, mask });
        }
        log::debug!("pruned block {layer} with {}", cfg.method.name());

        if layer + 1 < model.n_layers() {
            xs = par::map_slice(&xs, |x| pruned.run_layer(layer, x, false, false).residual);
        }
    }
    Ok(PrunedModel {
        model: pruned,
        masks: MaskBundle { masks },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_calibration_set, make_language};
    use crate::pruner::{prune_sparsegpt, prune_wanda};
    use crate::toymodel::ModelConfig;

    fn small() -> (ToyModel, CalibrationSet) {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ffn: 16,
            max_seq: 16,
            seed: 3,
            ..ModelConfig::default()
        };
        let model = ToyModel::init(cfg).unwrap();
        let langs = vec![
            make_language("a", 16, 0.1, 1).unwrap(),
            make_language("b", 16, 0.1, 2).unwrap(),
        ];
        let calib = build_calibration_set(&langs, 4, 10, 7).unwrap();
        (model, calib)
    }

    #[test]
    fn captured_inputs_have_one_column_per_token() {
        let (model, calib) = small();
        let one = CalibrationSet::from_parts(vec![calib.samples[0].clone()], vec!["a".into()], 10).unwrap();
        let inputs = collect_layer_inputs(&model, &one).unwrap();
        for l in 0..2 {
            for kind in LinearKind::ALL {
                assert_eq!(inputs.get(l, kind).cols(), 10);
                assert_eq!(inputs.get(l, kind).rows(), model.layers[l].linear(kind).cols());
            }
            assert_eq!(inputs.get(l, LinearKind::FfnUp), inputs.get(l, LinearKind::FfnGate));
        }
    }

    #[test]
    fn first_query_input_matches_standalone_norm() {
        let (model, calib) = small();
        let inputs = collect_layer_inputs(&model, &calib).unwrap();
        let x = inputs.get(0, LinearKind::Q);
        let tokens = &calib.samples[1];
        for (p, &t) in tokens.iter().enumerate() {
            let e: Vec<f64> = (0..8)
                .map(|j| model.token_embedding[(t as usize, j)] + model.position_embedding[(p, j)])
                .collect();
            let rms = (e.iter().map(|v| v * v).sum::<f64>() / 8.0 + 1e-6).sqrt();
            for j in 0..8 {
                let want = e[j] / rms * model.layers[0].attn_norm[j];
                assert!((x[(j, 10 + p)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_ratio_leaves_model_unchanged() {
        let (model, calib) = small();
        for method in [Method::Magnitude, Method::Wanda, Method::SparseGpt] {
            let cfg = PruneConfig {
                method,
                spec: SparsitySpec::unstructured(0.0),
                ..PruneConfig::default()
            };
            let out = prune_model(&model, &calib, &cfg, 0).unwrap();
            assert_eq!(out.model, model, "{}", method.name());
            assert!(out.masks.iter().all(|m| m.mask.keep.dropped() == 0));
            assert_eq!(out.masks.len(), 14);
        }
    }

    #[test]
    fn masks_are_exact_and_deterministic() {
        let (model, calib) = small();
        for method in [Method::Magnitude, Method::Wanda, Method::SparseGpt] {
            for spec in [SparsitySpec::unstructured(0.5), SparsitySpec::n_of_m(2, 4)] {
                let cfg = PruneConfig {
                    method,
                    spec,
                    ..PruneConfig::default()
                };
                let a = prune_model(&model, &calib, &cfg, 1).unwrap();
                let b = prune_model(&model, &calib, &cfg, 1).unwrap();
                a.masks.check_exact().unwrap();
                assert_eq!(a.masks, b.masks);
                assert_eq!(a.model, b.model);
                assert_eq!(a.masks.masks[0].mask.provenance.languages, vec!["a", "b"]);
            }
        }
    }

    #[test]
    fn first_block_matches_single_matrix_pruners() {
        let (model, calib) = small();
        let inputs = collect_layer_inputs(&model, &calib).unwrap();
        let spec = SparsitySpec::unstructured(0.5);
        let wanda = prune_model(&model, &calib, &PruneConfig::default(), 0).unwrap();
        let sgpt = prune_model(
            &model,
            &calib,
            &PruneConfig {
                method: Method::SparseGpt,
                ..PruneConfig::default()
            },
            0,
        )
        .unwrap();
        for kind in LinearKind::ALL {
            let w = model.layers[0].linear(kind);
            let x = inputs.get(0, kind);
            assert_eq!(wanda.masks.get(0, kind).unwrap().keep, prune_wanda(w, x, &spec).unwrap().keep);
            let (m, updated) = prune_sparsegpt(w, x, &spec, DEFAULT_DAMPING_FRAC, DEFAULT_BLOCK_SIZE).unwrap();
            assert_eq!(sgpt.masks.get(0, kind).unwrap().keep, m.keep);
            assert!(sgpt.model.layers[0].linear(kind).max_abs_diff(&updated).unwrap() < 1e-10);
        }
    }

    #[test]
    fn norms_and_embeddings_untouched() {
        let (model, calib) = small();
        let out = prune_model(&model, &calib, &PruneConfig::default(), 0).unwrap();
        assert_eq!(out.model.token_embedding, model.token_embedding);
        assert_eq!(out.model.position_embedding, model.position_embedding);
        assert_eq!(out.model.final_norm, model.final_norm);
        for (a, b) in out.model.layers.iter().zip(&model.layers) {
            assert_eq!(a.attn_norm, b.attn_norm);
            assert_eq!(a.ffn_norm, b.ffn_norm);
        }
    }
}
