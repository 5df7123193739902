//! Update rules: the prior-guided sign step, the plain SGD baseline, the
//! one-neuron-per-round pipeline baseline, and a two-parameter surface demo
//! contrasting the first two.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{attribute_neurons, AttributionMap, NeuronId};
use crate::error::{invalid, Error, Result};
use crate::model::{GradientTrace, TinyLM};
use crate::patch::{self, apply_patch, solve_patch, Snapshot, DEFAULT_ALPHA, DEFAULT_CLAMP};
use crate::repair::{FailureCase, RepairReport, Session};
use crate::semantics::semantic_delta;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Star,
    Sgd,
    Mint,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::Star => "star",
            Rule::Sgd => "sgd",
            Rule::Mint => "mint",
        })
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "star" => Ok(Rule::Star),
            "sgd" => Ok(Rule::Sgd),
            "mint" => Ok(Rule::Mint),
            other => Err(invalid(format!("unknown rule {other:?} (star, sgd, mint)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub rule: Rule,
    /// step size α (also the SGD learning rate and the patch factor)
    pub alpha: f64,
    pub max_steps: usize,
    pub clamp: (f64, f64),
    pub mint_candidate_pool: usize,
    /// sign applied to direct patches (pipeline baseline only)
    pub sign_convention: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            rule: Rule::Star,
            alpha: DEFAULT_ALPHA,
            max_steps: 10,
            clamp: DEFAULT_CLAMP,
            mint_candidate_pool: 10,
            sign_convention: patch::SIGN_CONVENTION,
        }
    }
}

impl OptimizerConfig {
    pub fn with_rule(rule: Rule) -> Self {
        Self {
            rule,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(invalid(format!("step size {} must be positive", self.alpha)));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be at least 1"));
        }
        if !(self.clamp.0 <= 0.0 && self.clamp.1 >= 0.0) {
            return Err(invalid("clamp bounds must bracket zero"));
        }
        if self.mint_candidate_pool == 0 {
            return Err(invalid("candidate pool must be at least 1"));
        }
        if self.sign_convention != 1.0 && self.sign_convention != -1.0 {
            return Err(invalid("sign convention must be +1 or -1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    /// parameters that moved
    pub updated: usize,
    /// parameters pinned by the drift clamp
    pub clamped: usize,
    pub max_update: f64,
}

fn check_fresh(model: &TinyLM, version: u64, what: &str) -> Result<()> {
    if version != model.version() {
        return Err(Error::InvalidState(format!(
            "{what} computed at model version {version}, model is at {}",
            model.version()
        )));
    }
    Ok(())
}

/// `w ← w − α · sign(g) · |W_Δ|` on the prior's rows, then the drift clamp.
pub fn star_step(
    model: &mut TinyLM,
    grads: &GradientTrace,
    prior: &patch::PatchPlan,
    alpha: f64,
    snapshot: &Snapshot,
) -> Result<StepSummary> {
    check_fresh(model, grads.model_version, "gradients")?;
    check_fresh(model, prior.model_version, "prior")?;
    let d = model.config().d_model;
    let mut out = StepSummary::default();
    if prior.rows.iter().all(|r| r.row.iter().all(|&m| m == 0.0)) {
        return Ok(out);
    }
    let params = model.params_mut();
    for r in &prior.rows {
        let NeuronId { layer, unit } = r.neuron;
        let g = grads.ffn_w2[layer].row(unit);
        let w2 = params.blocks[layer].ffn_w2.as_mut_slice();
        for j in 0..d {
            let m = r.row[j].abs();
            let s = sign(g[j]);
            if m == 0.0 || s == 0.0 {
                continue;
            }
            let idx = unit * d + j;
            let before = w2[idx];
            w2[idx] -= alpha * s * m;
            if snapshot.clamp_entry(layer, idx, &mut w2[idx]) {
                out.clamped += 1;
            }
            let moved = (w2[idx] - before).abs();
            if moved > 0.0 {
                out.updated += 1;
                out.max_update = out.max_update.max(moved);
            }
        }
    }
    Ok(out)
}

/// `w ← w − lr · g` on every `ffn_w2` entry, then the drift clamp.
pub fn sgd_step(
    model: &mut TinyLM,
    grads: &GradientTrace,
    lr: f64,
    snapshot: &Snapshot,
) -> Result<StepSummary> {
    check_fresh(model, grads.model_version, "gradients")?;
    let mut out = StepSummary::default();
    if grads.ffn_w2.iter().all(|g| g.as_slice().iter().all(|&x| x == 0.0)) {
        return Ok(out);
    }
    let params = model.params_mut();
    for (layer, (b, g)) in params.blocks.iter_mut().zip(&grads.ffn_w2).enumerate() {
        for (idx, (w, &gi)) in b.ffn_w2.as_mut_slice().iter_mut().zip(g.as_slice()).enumerate() {
            if gi == 0.0 {
                continue;
            }
            let before = *w;
            *w -= lr * gi;
            if snapshot.clamp_entry(layer, idx, w) {
                out.clamped += 1;
            }
            let moved = (*w - before).abs();
            if moved > 0.0 {
                out.updated += 1;
                out.max_update = out.max_update.max(moved);
            }
        }
    }
    Ok(out)
}

/// Pipeline baseline: each round attributes the failures, takes the top
/// `mint_candidate_pool` neurons over all layers, simulates every
/// candidate's solved single-neuron patch with a trial forward, keeps the
/// one with the lowest loss, and stops once every case is solved or after
/// `max_steps` rounds. A round costs `pool + 1` forwards per case.
pub fn mint_repair(
    model: &mut TinyLM,
    cases: &[FailureCase],
    config: &OptimizerConfig,
) -> Result<RepairReport> {
    config.validate()?;
    let started = Instant::now();
    let mut session = Session::start(model, cases, Rule::Mint, config)?;
    let bases = session.output_bases(model)?;
    while !session.all_solved() && session.steps_used < config.max_steps {
        let active = session.active();
        let grads = session.backward(model, &active);
        let mut maps = Vec::with_capacity(active.len());
        for (&i, g) in active.iter().zip(&grads) {
            maps.push(attribute_neurons(&session.states[i].trace, g)?);
        }
        let map = AttributionMap::sum(&maps).expect("at least one active case");
        let pool = top_neurons(&map, config.mint_candidate_pool);

        let owned: Vec<_> = active.iter().map(|&i| session.states[i].trace.clone()).collect();
        let traces: Vec<_> = owned.iter().collect();
        let deltas = active
            .iter()
            .map(|&i| {
                let t = &session.states[i].trace;
                semantic_delta(&bases, t.argmax(), cases[i].target)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut best: Option<(f64, patch::PatchPlan)> = None;
        for &n in &pool {
            let plan = solve_patch(&traces, &deltas, &[n])?.with_alpha(config.alpha);
            let row_backup = model.params().blocks[n.layer].ffn_w2.row(n.unit).to_vec();
            apply_patch(model, &plan, config.sign_convention, &session.snapshot)?;
            let mut loss = 0.0;
            for &i in &active {
                loss += session.trial_forward(model, i).loss(cases[i].target);
            }
            model.params_mut().blocks[n.layer]
                .ffn_w2
                .row_mut(n.unit)
                .copy_from_slice(&row_backup);
            if best.as_ref().is_none_or(|(l, _)| loss < *l) {
                best = Some((loss, plan));
            }
        }
        let (_, plan) = best.expect("pool is non-empty");
        // the plan was solved before the trial edits bumped the version
        let applied = apply_patch(model, &plan, config.sign_convention, &session.snapshot)?;
        session.clamped_entries += applied.clamped;
        session.record_neurons(&plan.neurons());
        session.steps_used += 1;
        session.refresh(model);
    }
    session.finish(model, started)
}

/// Global top-`k` neurons by score, ties to (layer, unit) ascending.
fn top_neurons(map: &AttributionMap, k: usize) -> Vec<NeuronId> {
    let mut all: Vec<(f64, NeuronId)> = map
        .scores
        .iter()
        .enumerate()
        .flat_map(|(l, s)| s.iter().enumerate().map(move |(u, &v)| (v, NeuronId::new(l, u))))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, n)| n).collect()
}

/// An inverted Gaussian `depth · exp(−|p − center|² / 2·width²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub center: [f64; 2],
    pub depth: f64,
    pub width: f64,
}

/// `offset − Σ wells` over two parameters; with no wells, the convex
/// bowl `½|p|²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub offset: f64,
    pub wells: Vec<Well>,
}

impl Surface {
    /// Shallow narrow well near the origin, where plain gradient descent
    /// settles, and a deep broad one farther out along the x axis.
    pub fn canonical() -> Self {
        Self {
            offset: 1.0,
            wells: vec![
                Well {
                    center: [0.1, 0.2],
                    depth: 0.3,
                    width: 0.1,
                },
                Well {
                    center: [1.0, 0.0],
                    depth: 0.9,
                    width: 0.5,
                },
            ],
        }
    }

    pub fn bowl() -> Self {
        Self {
            offset: 0.0,
            wells: vec![],
        }
    }

    pub fn loss(&self, p: [f64; 2]) -> f64 {
        let mut l = self.offset;
        if self.wells.is_empty() {
            return 0.5 * (p[0] * p[0] + p[1] * p[1]);
        }
        for w in &self.wells {
            l -= w.depth * w.bump(p);
        }
        l
    }

    pub fn grad(&self, p: [f64; 2]) -> [f64; 2] {
        if self.wells.is_empty() {
            return p;
        }
        let mut g = [0.0; 2];
        for w in &self.wells {
            let k = w.depth * w.bump(p) / (w.width * w.width);
            g[0] += k * (p[0] - w.center[0]);
            g[1] += k * (p[1] - w.center[1]);
        }
        g
    }

    /// Center of the deepest well.
    pub fn global_hint(&self) -> [f64; 2] {
        self.wells
            .iter()
            .max_by(|a, b| a.depth.total_cmp(&b.depth))
            .map_or([0.0; 2], |w| w.center)
    }
}

impl Well {
    fn bump(&self, p: [f64; 2]) -> f64 {
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        (-(dx * dx + dy * dy) / (2.0 * self.width * self.width)).exp()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub rule: Rule,
    /// `(x, y, loss)` from the origin, one entry per step plus the start
    pub points: Vec<(f64, f64, f64)>,
}

impl Trajectory {
    pub fn final_loss(&self) -> f64 {
        self.points.last().map_or(f64::NAN, |p| p.2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `values[i][j]` is the loss at `(xs[j], ys[i])`
    pub values: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDemo {
    pub surface: Surface,
    pub hint: [f64; 2],
    pub step_size: f64,
    pub steps: usize,
    pub grid: Grid,
    /// evenly spaced loss levels between the grid minimum and maximum
    pub contours: Vec<f64>,
    pub trajectories: Vec<Trajectory>,
}

fn finite_point(surface: &Surface, p: [f64; 2], rule: Rule, step: usize) -> Result<(f64, f64, f64)> {
    let l = surface.loss(p);
    if !l.is_finite() || !p[0].is_finite() || !p[1].is_finite() {
        return Err(Error::NonFinite(format!(
            "{rule} trajectory at step {step}: loss {l} at ({}, {})",
            p[0], p[1]
        )));
    }
    Ok((p[0], p[1], l))
}

/// Runs each rule from the origin for `steps` steps. The sign rule takes
/// its per-coordinate magnitude from the distance to `surface.global_hint()`.
pub fn record_surface_demo(
    surface: &Surface,
    rules: &[Rule],
    steps: usize,
    step_size: f64,
) -> Result<SurfaceDemo> {
    if !(step_size >= 0.0) || !step_size.is_finite() {
        return Err(invalid(format!("step size {step_size} must be finite and non-negative")));
    }
    let hint = surface.global_hint();
    let mut trajectories = Vec::with_capacity(rules.len());
    for &rule in rules {
        let mut p = [0.0f64; 2];
        let mut points = vec![finite_point(surface, p, rule, 0)?];
        for step in 1..=steps {
            let g = surface.grad(p);
            for k in 0..2 {
                p[k] -= match rule {
                    Rule::Sgd => step_size * g[k],
                    Rule::Star => step_size * sign(g[k]) * (hint[k] - p[k]).abs(),
                    Rule::Mint => {
                        return Err(invalid("the surface demo compares star and sgd only"))
                    }
                };
            }
            points.push(finite_point(surface, p, rule, step)?);
        }
        trajectories.push(Trajectory { rule, points });
    }

    let (lo, hi, n) = (-0.5, 1.5, 81);
    let axis: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let values: Vec<Vec<f64>> = axis
        .iter()
        .map(|&y| axis.iter().map(|&x| surface.loss([x, y])).collect())
        .collect();
    let (vmin, vmax) = values
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let contours = (1..=10).map(|i| vmin + (vmax - vmin) * i as f64 / 11.0).collect();
    Ok(SurfaceDemo {
        surface: surface.clone(),
        hint,
        step_size,
        steps,
        grid: Grid {
            xs: axis.clone(),
            ys: axis,
            values,
        },
        contours,
        trajectories,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
