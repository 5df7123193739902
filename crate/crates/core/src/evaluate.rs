//! Generation-quality, side-effect and overfitting metrics.
//!
//! G and S are artifact conventions: the gap lives in [−1, 1], so
//! `G = mean(max(0, Δgap)) / 2` over related probes and
//! `S = 1 − MAE(Δgap) / 2` over unrelated probes. Both are in [0, 1] and
//! larger is better.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::TinyLM;

/// `p_target − p_argmax`.
pub fn gap(probabilities: &[f64], target: usize) -> f64 {
    let max = probabilities
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    probabilities[target] - max
}

/// Fraction of truth positions reproduced exactly; missing predicted
/// positions count as mismatches.
pub fn exact_match(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if truth.is_empty() {
        return Err(invalid("exact match needs a non-empty reference"));
    }
    let hits = truth.iter().zip(pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / truth.len() as f64)
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU-4: geometric mean of clipped 1..4-gram precisions times
/// the brevity penalty. A precision whose clipped count is zero becomes
/// `1 / (total + 1)` instead of zeroing the whole score.
pub fn bleu4(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() || truth.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let p = ngram_counts(pred, n);
        let r = ngram_counts(truth, n);
        let total: usize = p.values().sum();
        let clipped: usize = p
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let precision = if clipped == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            clipped as f64 / total as f64
        };
        log_sum += precision.ln() / 4.0;
    }
    let (c, r) = (pred.len() as f64, truth.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    (bp * log_sum.exp()).clamp(0.0, 1.0)
}

/// Greedy continuation of `prompt` for `len` tokens.
pub fn greedy_continuation(model: &TinyLM, prompt: &[usize], len: usize) -> Result<Vec<usize>> {
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        if tokens.len() > model.config().max_seq {
            tokens.remove(0);
        }
        let next = model.forward(&tokens)?.argmax();
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Related,
    Unrelated,
}

/// A prompt whose next-token gap is tracked across a repair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub id: String,
    pub tokens: Vec<usize>,
    pub target: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapChange {
    pub probe_id: String,
    pub relation: Relation,
    pub gap_before: f64,
    pub gap_after: f64,
    pub delta: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GroupStats {
    pub count: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mean_delta: f64,
}

impl GroupStats {
    fn of(deltas: &[f64]) -> Self {
        if deltas.is_empty() {
            return Self::default();
        }
        let n = deltas.len() as f64;
        Self {
            count: deltas.len(),
            mae: deltas.iter().map(|d| d.abs()).sum::<f64>() / n,
            rmse: (deltas.iter().map(|d| d * d).sum::<f64>() / n).sqrt(),
            mean_delta: deltas.iter().sum::<f64>() / n,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SideEffectReport {
    pub g: f64,
    pub s: f64,
    pub gsh: f64,
    pub related: GroupStats,
    pub unrelated: GroupStats,
    pub changes: Vec<GapChange>,
}

/// Harmonic mean `2GS / (G + S)`, zero when `G + S = 0`.
pub fn gsh(g: f64, s: f64) -> f64 {
    if g + s == 0.0 {
        0.0
    } else {
        2.0 * g * s / (g + s)
    }
}

/// G from related-probe gap changes.
pub fn generalization(deltas: &[f64]) -> f64 {
    if deltas.is_empty() {
        return 0.0;
    }
    deltas.iter().map(|d| d.max(0.0)).sum::<f64>() / deltas.len() as f64 / 2.0
}

/// S from unrelated-probe gap changes.
pub fn specificity(deltas: &[f64]) -> f64 {
    1.0 - GroupStats::of(deltas).mae / 2.0
}

/// Gap changes of each probe between two models.
pub fn gap_changes(
    before: &TinyLM,
    after: &TinyLM,
    probes: &[Probe],
    relation: Relation,
) -> Result<Vec<GapChange>> {
    probes
        .iter()
        .map(|p| {
            let gap_before = before.forward(&p.tokens)?.gap(p.target);
            let gap_after = after.forward(&p.tokens)?.gap(p.target);
            Ok(GapChange {
                probe_id: p.id.clone(),
                relation,
                gap_before,
                gap_after,
                delta: gap_after - gap_before,
            })
        })
        .collect()
}

pub fn side_effects_from_changes(changes: Vec<GapChange>) -> Result<SideEffectReport> {
    let pick = |rel| -> Vec<f64> {
        changes
            .iter()
            .filter(|c| c.relation == rel)
            .map(|c| c.delta)
            .collect()
    };
    let rel = pick(Relation::Related);
    let unrel = pick(Relation::Unrelated);
    if rel.is_empty() || unrel.is_empty() {
        return Err(invalid("side effects need related and unrelated probes"));
    }
    let g = generalization(&rel);
    let s = specificity(&unrel);
    Ok(SideEffectReport {
        g,
        s,
        gsh: gsh(g, s),
        related: GroupStats::of(&rel),
        unrelated: GroupStats::of(&unrel),
        changes,
    })
}

pub fn side_effects(
    before: &TinyLM,
    after: &TinyLM,
    related: &[Probe],
    unrelated: &[Probe],
) -> Result<SideEffectReport> {
    if related.is_empty() || unrelated.is_empty() {
        return Err(invalid("side effects need related and unrelated probes"));
    }
    let mut changes = gap_changes(before, after, related, Relation::Related)?;
    changes.extend(gap_changes(before, after, unrelated, Relation::Unrelated)?);
    side_effects_from_changes(changes)
}

/// Relative performance drop `(P_base − P_k) / P_base`.
pub fn rpd(p_base: f64, p_k: f64) -> f64 {
    (p_base - p_k) / p_base
}

/// Linear interpolation between order statistics at rank `q·(n−1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OverfitStats {
    pub rpd: Vec<f64>,
    pub mean: f64,
    /// population standard deviation
    pub std: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    /// share of samples with a positive drop, in percent
    pub degradation_percent: f64,
}

pub fn overfit_stats(p_base: f64, series: &[f64]) -> Result<OverfitStats> {
    if !(p_base > 0.0) || !p_base.is_finite() {
        return Err(invalid("baseline performance must be positive"));
    }
    if series.is_empty() {
        return Err(invalid("performance series is empty"));
    }
    let rpd: Vec<f64> = series.iter().map(|&p| rpd(p_base, p)).collect();
    let n = rpd.len() as f64;
    let mean = rpd.iter().sum::<f64>() / n;
    let std = (rpd.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let mut sorted = rpd.clone();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile(&sorted, 0.25);
    let q3 = quantile(&sorted, 0.75);
    let degraded = rpd.iter().filter(|&&x| x > 0.0).count();
    Ok(OverfitStats {
        mean,
        std,
        q1,
        q3,
        iqr: q3 - q1,
        degradation_percent: 100.0 * degraded as f64 / n,
        rpd,
    })
}
