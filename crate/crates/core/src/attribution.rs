//! Locating buggy neurons: Input×Gradient scores on the FFN intermediate,
//! occlusion ranking of layers, and sparsity-pattern selection.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::norm;
use crate::model::{ForwardTrace, GradientTrace, TinyLM};

/// One FFN hidden unit: row `unit` of `blocks[layer].ffn_w2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttributionMap {
    /// `scores[layer][unit] = |v[unit] · ∂loss/∂v[unit]|`
    pub scores: Vec<Vec<f64>>,
    /// `‖∂loss/∂X_i ⊙ X_i‖₂` per input position
    pub token_scores: Vec<f64>,
}

impl AttributionMap {
    pub fn score(&self, id: NeuronId) -> f64 {
        self.scores[id.layer][id.unit]
    }

    pub fn n_layers(&self) -> usize {
        self.scores.len()
    }

    /// Element-wise sum, used when several failures are located together.
    pub fn sum(maps: &[AttributionMap]) -> Option<AttributionMap> {
        let (first, rest) = maps.split_first()?;
        let mut out = first.clone();
        for m in rest {
            for (a, b) in out.scores.iter_mut().zip(&m.scores) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        Some(out)
    }
}

/// Input×Gradient with the FFN intermediate as the "input" of `ffn_w2`.
pub fn attribute_neurons(trace: &ForwardTrace, grads: &GradientTrace) -> Result<AttributionMap> {
    if trace.model_version != grads.model_version {
        return Err(invalid("trace and gradients come from different model versions"));
    }
    if trace.ffn_intermediate.len() != grads.ffn_intermediate.len()
        || trace.input_embeddings.len() != grads.input_embeddings.len()
    {
        return Err(invalid("trace and gradients have different shapes"));
    }
    let mut scores = Vec::with_capacity(trace.ffn_intermediate.len());
    for (v, g) in trace.ffn_intermediate.iter().zip(&grads.ffn_intermediate) {
        if v.len() != g.len() {
            return Err(invalid("trace and gradients have different FFN widths"));
        }
        scores.push(v.iter().zip(g.iter()).map(|(a, b)| (a * b).abs()).collect());
    }
    let token_scores = trace
        .input_embeddings
        .iter()
        .zip(&grads.input_embeddings)
        .map(|(x, g)| {
            let prod: Vec<f64> = x.iter().zip(g.iter()).map(|(a, b)| a * b).collect();
            norm(&prod)
        })
        .collect();
    Ok(AttributionMap {
        scores,
        token_scores,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerOcclusion {
    pub layer: usize,
    pub baseline_loss: f64,
    pub occluded_loss: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerOcclusionReport {
    pub layers: Vec<LayerOcclusion>,
    /// layer indices by delta descending, ties to the lower index
    pub ranking: Vec<usize>,
}

/// Disables each block in turn and measures `|occluded − baseline|` of the
/// summed loss over `cases`.
pub fn rank_layers_by_occlusion_batch(
    model: &TinyLM,
    cases: &[(&[usize], usize)],
) -> Result<LayerOcclusionReport> {
    if cases.is_empty() {
        return Err(invalid("occlusion needs at least one case"));
    }
    let mut baseline = 0.0;
    for &(tokens, target) in cases {
        model.check_tokens(&[target]).map_err(|_| invalid("target out of range"))?;
        baseline += model.forward(tokens)?.loss(target);
    }
    let mut layers = Vec::with_capacity(model.n_layers());
    for layer in 0..model.n_layers() {
        let mut occluded = 0.0;
        for &(tokens, target) in cases {
            occluded += model.forward_with_layer_disabled(tokens, layer)?.loss(target);
        }
        layers.push(LayerOcclusion {
            layer,
            baseline_loss: baseline,
            occluded_loss: occluded,
            delta: (occluded - baseline).abs(),
        });
    }
    let mut ranking: Vec<usize> = (0..layers.len()).collect();
    ranking.sort_by(|&a, &b| layers[b].delta.total_cmp(&layers[a].delta).then(a.cmp(&b)));
    Ok(LayerOcclusionReport { layers, ranking })
}

pub fn rank_layers_by_occlusion(
    model: &TinyLM,
    tokens: &[usize],
    target: usize,
) -> Result<LayerOcclusionReport> {
    rank_layers_by_occlusion_batch(model, &[(tokens, target)])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsityMode {
    ModelWise,
    LayerWise,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Count(usize),
    /// fraction of the neurons in scope
    Proportion(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityPattern {
    pub mode: SparsityMode,
    /// share of layers kept in scope; only used layer-wise
    pub layer_proportion: f64,
    pub budget: Budget,
}

impl SparsityPattern {
    /// Layer-wise over the top half of layers with `⌈d_ffn/16⌉` neurons.
    pub fn recommended(d_ffn: usize) -> Self {
        Self {
            mode: SparsityMode::LayerWise,
            layer_proportion: 0.5,
            budget: Budget::Count(recommended_budget(d_ffn)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |p: f64| p > 0.0 && p <= 1.0;
        if self.mode == SparsityMode::LayerWise && !in_unit(self.layer_proportion) {
            return Err(invalid(format!(
                "layer proportion {} must be in (0, 1]",
                self.layer_proportion
            )));
        }
        match self.budget {
            Budget::Count(0) => Err(invalid("neuron budget must be at least 1")),
            Budget::Proportion(p) if !in_unit(p) => {
                Err(invalid(format!("neuron proportion {p} must be in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

pub fn recommended_budget(d_ffn: usize) -> usize {
    d_ffn.div_ceil(16)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub neurons: Vec<NeuronId>,
    pub layers_in_scope: Vec<usize>,
    pub requested: usize,
    /// the budget exceeded the neurons in scope and was clamped
    pub clamped: bool,
}

/// Top neurons by score within the pattern's scope, ordered by
/// (score desc, layer asc, unit asc).
pub fn select_buggy_neurons(
    map: &AttributionMap,
    occlusion: &LayerOcclusionReport,
    pattern: &SparsityPattern,
) -> Result<Selection> {
    pattern.validate()?;
    let n_layers = map.n_layers();
    if occlusion.ranking.len() != n_layers {
        return Err(invalid("occlusion report and attribution map disagree on layers"));
    }
    let mut scope: Vec<usize> = match pattern.mode {
        SparsityMode::ModelWise => (0..n_layers).collect(),
        SparsityMode::LayerWise => {
            let k = ((pattern.layer_proportion * n_layers as f64).ceil() as usize).clamp(1, n_layers);
            occlusion.ranking[..k].to_vec()
        }
    };
    scope.sort_unstable();
    let mut candidates: Vec<(f64, NeuronId)> = scope
        .iter()
        .flat_map(|&l| {
            map.scores[l]
                .iter()
                .enumerate()
                .map(move |(u, &s)| (s, NeuronId::new(l, u)))
        })
        .collect();
    let available = candidates.len();
    let requested = match pattern.budget {
        Budget::Count(k) => k,
        Budget::Proportion(p) => ((p * available as f64).ceil() as usize).max(1),
    };
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let take = requested.min(available);
    Ok(Selection {
        neurons: candidates[..take].iter().map(|c| c.1).collect(),
        layers_in_scope: scope,
        requested,
        clamped: requested > available,
    })
}
