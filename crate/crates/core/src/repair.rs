//! Repair sessions: failure detection, the step loop shared by the
//! gradient rules, stopping, verification and reports.

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attribution::{
    attribute_neurons, rank_layers_by_occlusion_batch, select_buggy_neurons, AttributionMap,
    LayerOcclusionReport, NeuronId, SparsityPattern,
};
use crate::data::Example;
use crate::error::{invalid, Result};
use crate::model::{forward_cache, Cache, ForwardTrace, GradScope, GradientTrace, TinyLM};
use crate::optimize::{mint_repair, sgd_step, star_step, OptimizerConfig, Rule};
use crate::patch::{solve_patch, RepairMode, Snapshot};
use crate::semantics::{output_side_bases, semantic_delta, SemanticBases};

/// A next-token prediction whose argmax differs from the ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailureCase {
    pub id: String,
    /// 1-based dataset line
    pub line: usize,
    /// index into the target's tokens
    pub position: usize,
    pub tokens: Vec<usize>,
    pub target: usize,
    pub argmax: usize,
    pub gap: f64,
}

/// Every teacher-forced next-token case of a dataset, failing or not.
pub fn expand_cases(model: &TinyLM, examples: &[Example]) -> Result<Vec<FailureCase>> {
    let mut out = Vec::new();
    for (i, ex) in examples.iter().enumerate() {
        let line = i + 1;
        let target = ex.target_tokens();
        if target.is_empty() {
            return Err(invalid(format!("line {line}: target is empty")));
        }
        let mut tokens = ex.prompt_tokens();
        for (pos, &t) in target.iter().enumerate() {
            let trace = model.forward(&tokens)?;
            model.check_tokens(&[t])?;
            out.push(FailureCase {
                id: if target.len() == 1 {
                    line.to_string()
                } else {
                    format!("{line}.{pos}")
                },
                line,
                position: pos,
                tokens: tokens.clone(),
                target: t,
                argmax: trace.argmax(),
                gap: trace.gap(t),
            });
            tokens.push(t);
        }
    }
    Ok(out)
}

/// Cases whose argmax is not the target, in dataset order then position.
pub fn detect_failures(model: &TinyLM, examples: &[Example]) -> Result<Vec<FailureCase>> {
    Ok(expand_cases(model, examples)?
        .into_iter()
        .filter(|c| c.argmax != c.target)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairOptions {
    pub optimizer: OptimizerConfig,
    pub pattern: SparsityPattern,
    /// restore the pre-repair weights when a session ends unsolved
    pub revert_on_fail: bool,
}

impl RepairOptions {
    pub fn new(rule: Rule, d_ffn: usize) -> Self {
        Self {
            optimizer: OptimizerConfig::with_rule(rule),
            pattern: SparsityPattern::recommended(d_ffn),
            revert_on_fail: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.pattern.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub id: String,
    pub solved: bool,
    pub argmax_after: usize,
    pub loss_before: f64,
    pub loss_after: f64,
    pub gap_before: f64,
    pub gap_after: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCounts {
    pub forward: usize,
    pub backward: usize,
    /// occluded forwards for layer ranking
    pub occlusion: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub failure_ids: Vec<String>,
    pub rule: Rule,
    pub mode: RepairMode,
    /// every case re-verified by a fresh forward after the session
    pub solved: bool,
    /// nothing was failing when the session started
    pub noop: bool,
    pub steps_used: usize,
    pub neurons_patched: Vec<NeuronId>,
    /// summed over cases
    pub loss_before: f64,
    pub loss_after: f64,
    /// averaged over cases
    pub gap_before: f64,
    pub gap_after: f64,
    pub cases: Vec<CaseOutcome>,
    pub passes: PassCounts,
    pub clamped_entries: usize,
    pub max_drift: f64,
    pub reverted: bool,
    /// Wall time is kept out of the serialized report so that reports of
    /// identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_seconds: f64,
}

pub(crate) struct CaseState {
    cache: Cache,
    pub trace: ForwardTrace,
    pub solved: bool,
}

/// Mutable bookkeeping of one repair session.
pub(crate) struct Session<'c> {
    cases: &'c [FailureCase],
    rule: Rule,
    pub states: Vec<CaseState>,
    pub snapshot: Snapshot,
    pub steps_used: usize,
    pub passes: PassCounts,
    pub clamped_entries: usize,
    neurons: Vec<NeuronId>,
    seen: BTreeSet<NeuronId>,
    before: Vec<(f64, f64)>,
    initially_solved: bool,
    bases: Option<SemanticBases>,
}

impl<'c> Session<'c> {
    pub fn start(
        model: &TinyLM,
        cases: &'c [FailureCase],
        rule: Rule,
        config: &OptimizerConfig,
    ) -> Result<Self> {
        if cases.is_empty() {
            return Err(invalid("repair needs at least one case"));
        }
        for c in cases {
            model.check_tokens(&c.tokens)?;
            model.check_tokens(&[c.target])?;
        }
        let mut s = Session {
            cases,
            rule,
            states: Vec::with_capacity(cases.len()),
            snapshot: Snapshot::take(model, config.clamp)?,
            steps_used: 0,
            passes: PassCounts::default(),
            clamped_entries: 0,
            neurons: Vec::new(),
            seen: BTreeSet::new(),
            before: Vec::new(),
            initially_solved: false,
            bases: None,
        };
        s.refresh(model);
        s.initially_solved = s.all_solved();
        s.before = s
            .states
            .iter()
            .zip(cases)
            .map(|(st, c)| (st.trace.loss(c.target), st.trace.gap(c.target)))
            .collect();
        Ok(s)
    }

    fn state(&mut self, model: &TinyLM, i: usize) -> CaseState {
        self.passes.forward += 1;
        let c = &self.cases[i];
        let cache = forward_cache(model, &c.tokens, None);
        let trace = cache.trace(model);
        let solved = trace.argmax() == c.target;
        CaseState {
            cache,
            trace,
            solved,
        }
    }

    /// Re-runs the forward pass of every case at the current parameters.
    pub fn refresh(&mut self, model: &TinyLM) {
        self.states = (0..self.cases.len()).map(|i| self.state(model, i)).collect();
    }

    pub fn trial_forward(&mut self, model: &TinyLM, i: usize) -> ForwardTrace {
        self.state(model, i).trace
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.states.len()).filter(|&i| !self.states[i].solved).collect()
    }

    pub fn all_solved(&self) -> bool {
        self.states.iter().all(|s| s.solved)
    }

    /// Gradients of each listed case from its cached forward.
    pub fn backward(&mut self, model: &TinyLM, idx: &[usize]) -> Vec<GradientTrace> {
        self.passes.backward += idx.len();
        idx.iter()
            .map(|&i| {
                GradientTrace::from_cache(
                    model,
                    &self.states[i].cache,
                    self.cases[i].target,
                    GradScope::Repair,
                )
            })
            .collect()
    }

    pub fn output_bases(&mut self, model: &TinyLM) -> Result<SemanticBases> {
        if self.bases.is_none() {
            self.bases = Some(output_side_bases(&model.params().lm_head)?);
        }
        Ok(self.bases.clone().expect("just set"))
    }

    pub fn occlusion(&mut self, model: &TinyLM) -> Result<LayerOcclusionReport> {
        let cases: Vec<(&[usize], usize)> = self
            .cases
            .iter()
            .map(|c| (c.tokens.as_slice(), c.target))
            .collect();
        self.passes.forward += cases.len();
        self.passes.occlusion += cases.len() * model.n_layers();
        rank_layers_by_occlusion_batch(model, &cases)
    }

    pub fn record_neurons(&mut self, ns: &[NeuronId]) {
        for &n in ns {
            if self.seen.insert(n) {
                self.neurons.push(n);
            }
        }
    }

    /// Verifies every case with a fresh forward and assembles the report.
    pub fn finish(self, model: &TinyLM, started: Instant) -> Result<RepairReport> {
        let mut cases = Vec::with_capacity(self.cases.len());
        for (c, &(loss_before, gap_before)) in self.cases.iter().zip(&self.before) {
            let t = model.forward(&c.tokens)?;
            cases.push(CaseOutcome {
                id: c.id.clone(),
                solved: t.argmax() == c.target,
                argmax_after: t.argmax(),
                loss_before,
                loss_after: t.loss(c.target),
                gap_before,
                gap_after: t.gap(c.target),
            });
        }
        let n = cases.len() as f64;
        let noop = self.initially_solved;
        Ok(RepairReport {
            failure_ids: self.cases.iter().map(|c| c.id.clone()).collect(),
            rule: self.rule,
            mode: if self.cases.len() == 1 {
                RepairMode::Single
            } else {
                RepairMode::Multiple
            },
            solved: cases.iter().all(|c| c.solved),
            noop,
            steps_used: self.steps_used,
            neurons_patched: self.neurons,
            loss_before: cases.iter().map(|c| c.loss_before).sum(),
            loss_after: cases.iter().map(|c| c.loss_after).sum(),
            gap_before: cases.iter().map(|c| c.gap_before).sum::<f64>() / n,
            gap_after: cases.iter().map(|c| c.gap_after).sum::<f64>() / n,
            cases,
            passes: self.passes,
            clamped_entries: self.clamped_entries,
            max_drift: self.snapshot.max_drift(model),
            reverted: false,
            wall_time_seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// The step loop of the two gradient rules.
fn gradient_repair(
    model: &mut TinyLM,
    cases: &[FailureCase],
    opts: &RepairOptions,
) -> Result<RepairReport> {
    let started = Instant::now();
    let cfg = &opts.optimizer;
    let mut session = Session::start(model, cases, cfg.rule, cfg)?;
    if session.all_solved() {
        return session.finish(model, started);
    }
    let star = cfg.rule == Rule::Star;
    let (bases, occlusion) = if star {
        (Some(session.output_bases(model)?), Some(session.occlusion(model)?))
    } else {
        (None, None)
    };
    while !session.all_solved() && session.steps_used < cfg.max_steps {
        let active = session.active();
        let grads = session.backward(model, &active);
        let total = GradientTrace::sum(&grads).expect("at least one active case");
        let step = if star {
            let mut maps = Vec::with_capacity(active.len());
            for (&i, g) in active.iter().zip(&grads) {
                maps.push(attribute_neurons(&session.states[i].trace, g)?);
            }
            let map = AttributionMap::sum(&maps).expect("at least one active case");
            let selection =
                select_buggy_neurons(&map, occlusion.as_ref().expect("star"), &opts.pattern)?;
            let bases = bases.as_ref().expect("star");
            let deltas = active
                .iter()
                .map(|&i| {
                    semantic_delta(bases, session.states[i].trace.argmax(), cases[i].target)
                })
                .collect::<Result<Vec<_>>>()?;
            let traces: Vec<_> = active.iter().map(|&i| &session.states[i].trace).collect();
            let prior = solve_patch(&traces, &deltas, &selection.neurons)?;
            session.record_neurons(&selection.neurons);
            star_step(model, &total, &prior, cfg.alpha, &session.snapshot)?
        } else {
            sgd_step(model, &total, cfg.alpha, &session.snapshot)?
        };
        session.clamped_entries += step.clamped;
        session.steps_used += 1;
        session.refresh(model);
    }
    session.finish(model, started)
}

/// Repairs `cases` jointly: every step sums the losses of the cases that
/// still fail, and the pattern-guided rule solves one stacked patch.
pub fn repair_multiple(
    model: &mut TinyLM,
    cases: &[FailureCase],
    opts: &RepairOptions,
) -> Result<RepairReport> {
    opts.validate()?;
    let snapshot = opts
        .revert_on_fail
        .then(|| Snapshot::take(model, opts.optimizer.clamp))
        .transpose()?;
    let mut report = match opts.optimizer.rule {
        Rule::Mint => mint_repair(model, cases, &opts.optimizer)?,
        Rule::Star | Rule::Sgd => gradient_repair(model, cases, opts)?,
    };
    report.mode = RepairMode::Multiple;
    if let (false, Some(s)) = (report.solved, snapshot) {
        s.restore(model);
        report.reverted = true;
        for (c, out) in cases.iter().zip(report.cases.iter_mut()) {
            let t = model.forward(&c.tokens)?;
            out.argmax_after = t.argmax();
            out.loss_after = t.loss(c.target);
            out.gap_after = t.gap(c.target);
            out.solved = out.argmax_after == c.target;
        }
        report.loss_after = report.cases.iter().map(|c| c.loss_after).sum();
        report.gap_after =
            report.cases.iter().map(|c| c.gap_after).sum::<f64>() / report.cases.len() as f64;
        report.max_drift = 0.0;
    }
    Ok(report)
}

/// One failure on its own; the same trajectory as a batch of one.
pub fn repair_single(
    model: &mut TinyLM,
    case: &FailureCase,
    opts: &RepairOptions,
) -> Result<RepairReport> {
    let mut report = repair_multiple(model, std::slice::from_ref(case), opts)?;
    report.mode = RepairMode::Single;
    Ok(report)
}

/// Repairs every case on its own copy of `model`. `visit` sees each
/// repaired copy before it is dropped.
pub fn repair_each<F>(
    model: &TinyLM,
    cases: &[FailureCase],
    opts: &RepairOptions,
    mut visit: F,
) -> Result<Vec<RepairReport>>
where
    F: FnMut(&FailureCase, &TinyLM, &RepairReport) -> Result<()>,
{
    opts.validate()?;
    let mut reports = Vec::with_capacity(cases.len());
    for case in cases {
        let mut m = model.clone();
        let report = repair_single(&mut m, case, opts)?;
        visit(case, &m, &report)?;
        reports.push(report);
    }
    Ok(reports)
}
