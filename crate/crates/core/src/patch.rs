//! Neuron patches: least-squares weight deltas for selected rows of the
//! FFN output matrices, their application, and the cumulative drift clamp.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::NeuronId;
use crate::error::{invalid, Result};
use crate::linalg::{self, Matrix, Vector};
use crate::model::{fingerprint, ForwardTrace, TinyLM};

pub const DEFAULT_ALPHA: f64 = 1e-2;
pub const DEFAULT_CLAMP: (f64, f64) = (-0.1, 0.1);

/// Sign applied to `α·W_Δ` so that a direct patch moves the logits from
/// the argmax token towards the target. `s_Δ` points from the target's
/// output basis to the argmax's, so the patch has to be subtracted. Frozen
/// from the calibration test in `tests/patch.rs`.
pub const SIGN_CONVENTION: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepairMode {
    Single,
    Multiple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronRow {
    pub neuron: NeuronId,
    pub row: Vec<f64>,
}

/// Solved `W_Δ` restricted to the selected neurons; all other rows are zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchPlan {
    pub rows: Vec<NeuronRow>,
    pub alpha: f64,
    pub clamp: (f64, f64),
    pub mode: RepairMode,
    pub sources: Vec<String>,
    /// some targeted layer had an all-zero activation block
    pub degenerate: bool,
    pub model_version: u64,
}

impl PatchPlan {
    pub fn is_zero(&self) -> bool {
        self.rows.iter().all(|r| r.row.iter().all(|&x| x == 0.0))
    }

    pub fn neurons(&self) -> Vec<NeuronId> {
        self.rows.iter().map(|r| r.neuron).collect()
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn with_sources(mut self, sources: Vec<String>) -> Self {
        self.sources = sources;
        self
    }
}

/// For each targeted layer, stacks the failures' activations restricted to
/// the selected units as `A (k × n_sel)` and their semantic deltas as
/// `B (k × d_model)`, and solves `A · W_Δ ≈ B` in the least-squares sense.
pub fn solve_patch(
    traces: &[&ForwardTrace],
    deltas: &[Vector],
    neurons: &[NeuronId],
) -> Result<PatchPlan> {
    if neurons.is_empty() {
        return Err(invalid("no neurons selected for patching"));
    }
    if traces.is_empty() || traces.len() != deltas.len() {
        return Err(invalid(format!(
            "need one semantic delta per trace, got {} traces and {} deltas",
            traces.len(),
            deltas.len()
        )));
    }
    let version = traces[0].model_version;
    if traces.iter().any(|t| t.model_version != version) {
        return Err(invalid("traces come from different model versions"));
    }
    let n_layers = traces[0].ffn_intermediate.len();
    let d_model = deltas[0].len();
    if deltas.iter().any(|d| d.len() != d_model) {
        return Err(invalid("semantic deltas differ in dimension"));
    }

    let mut by_layer: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for n in neurons {
        if n.layer >= n_layers || n.unit >= traces[0].ffn_intermediate[n.layer].len() {
            return Err(invalid(format!("neuron {n:?} out of range")));
        }
        by_layer.entry(n.layer).or_default().push(n.unit);
    }
    let b = Matrix::from_fn(deltas.len(), d_model, |r, c| deltas[r][c]);

    let mut solved: BTreeMap<NeuronId, Vec<f64>> = BTreeMap::new();
    let mut degenerate = false;
    for (&layer, units) in &by_layer {
        let a = Matrix::from_fn(traces.len(), units.len(), |r, c| {
            traces[r].ffn_intermediate[layer][units[c]]
        });
        if a.as_slice().iter().all(|&x| x == 0.0) {
            degenerate = true;
        }
        let x = linalg::lstsq(&a, &b, linalg::DEFAULT_TOLERANCE)?;
        for (i, &u) in units.iter().enumerate() {
            solved.insert(NeuronId::new(layer, u), x.row(i).to_vec());
        }
    }
    let rows = neurons
        .iter()
        .map(|n| NeuronRow {
            neuron: *n,
            row: solved[n].clone(),
        })
        .collect();
    Ok(PatchPlan {
        rows,
        alpha: DEFAULT_ALPHA,
        clamp: DEFAULT_CLAMP,
        mode: if traces.len() == 1 {
            RepairMode::Single
        } else {
            RepairMode::Multiple
        },
        sources: Vec::new(),
        degenerate,
        model_version: version,
    })
}

/// Pre-repair copy of every `ffn_w2`, against which cumulative drift is
/// clamped.
#[derive(Clone, Debug)]
pub struct Snapshot {
    ffn_w2: Vec<Matrix>,
    pub clamp: (f64, f64),
}

impl Snapshot {
    pub fn take(model: &TinyLM, clamp: (f64, f64)) -> Result<Self> {
        if !(clamp.0 <= 0.0 && clamp.1 >= 0.0) {
            return Err(invalid(format!(
                "clamp bounds ({}, {}) must bracket zero",
                clamp.0, clamp.1
            )));
        }
        Ok(Self {
            ffn_w2: model.params().blocks.iter().map(|b| b.ffn_w2.clone()).collect(),
            clamp,
        })
    }

    pub fn original(&self, layer: usize) -> &Matrix {
        &self.ffn_w2[layer]
    }

    /// Clamps `w` into `[orig + lo, orig + hi]`; returns whether it moved.
    #[inline]
    pub(crate) fn clamp_entry(&self, layer: usize, idx: usize, w: &mut f64) -> bool {
        let orig = self.ffn_w2[layer].as_slice()[idx];
        let lo = orig + self.clamp.0;
        let hi = orig + self.clamp.1;
        if *w > hi {
            *w = hi;
            true
        } else if *w < lo {
            *w = lo;
            true
        } else {
            false
        }
    }

    /// Puts every `ffn_w2` back to its snapshot value.
    pub fn restore(&self, model: &mut TinyLM) {
        for (b, orig) in model.params_mut().blocks.iter_mut().zip(&self.ffn_w2) {
            b.ffn_w2 = orig.clone();
        }
    }

    /// Largest `|w − w_orig|` over all `ffn_w2` entries.
    pub fn max_drift(&self, model: &TinyLM) -> f64 {
        model
            .params()
            .blocks
            .iter()
            .zip(&self.ffn_w2)
            .flat_map(|(b, o)| b.ffn_w2.as_slice().iter().zip(o.as_slice()))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AppliedPatch {
    /// L2 norm of the row change actually applied, per neuron
    pub magnitudes: Vec<(NeuronId, f64)>,
    /// entries the drift clamp pinned
    pub clamped: usize,
}

/// `W ← W + sign·α·W_Δ` on the plan's rows, followed by the drift clamp.
pub fn apply_patch(
    model: &mut TinyLM,
    plan: &PatchPlan,
    sign_convention: f64,
    snapshot: &Snapshot,
) -> Result<AppliedPatch> {
    if sign_convention != 1.0 && sign_convention != -1.0 {
        return Err(invalid("sign convention must be +1 or -1"));
    }
    let cfg = model.config().clone();
    for r in &plan.rows {
        if r.neuron.layer >= cfg.n_layers || r.neuron.unit >= cfg.d_ffn || r.row.len() != cfg.d_model {
            return Err(invalid(format!("plan row {:?} does not fit the model", r.neuron)));
        }
    }
    let mut out = AppliedPatch::default();
    if plan.alpha == 0.0 || plan.rows.is_empty() {
        return Ok(out);
    }
    let scale = sign_convention * plan.alpha;
    let params = model.params_mut();
    for r in &plan.rows {
        let NeuronId { layer, unit } = r.neuron;
        let w2 = &mut params.blocks[layer].ffn_w2;
        let base = unit * cfg.d_model;
        let mut sq = 0.0;
        for (j, &delta) in r.row.iter().enumerate() {
            let w = &mut w2.as_mut_slice()[base + j];
            let before = *w;
            *w += scale * delta;
            if snapshot.clamp_entry(layer, base + j, w) {
                out.clamped += 1;
            }
            sq += (*w - before).powi(2);
        }
        out.magnitudes.push((r.neuron, sq.sqrt()));
    }
    Ok(out)
}

/// Fingerprints of every tensor that repair must leave untouched
/// (everything except the FFN output matrices).
pub fn frozen_fingerprints(model: &TinyLM) -> Vec<(String, u64)> {
    model
        .params()
        .tensors()
        .into_iter()
        .filter(|t| !t.name.ends_with("ffn_w2"))
        .map(|t| (t.name, fingerprint(t.data)))
        .collect()
}
