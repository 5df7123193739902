//! Command implementations behind the `lmrepair` binary. Every command
//! validates its configuration before touching a checkpoint, writes JSON
//! into its output location and returns a value the binary renders as a
//! table.

pub mod table;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use lmrepair_core::attribution::{recommended_budget, Budget, SparsityMode, SparsityPattern};
use lmrepair_core::data::{read_jsonl, write_jsonl, Example};
use lmrepair_core::evaluate::{gap_changes, side_effects_from_changes, Probe, Relation, SideEffectReport};
use lmrepair_core::model::checkpoint::{load_checkpoint, save_checkpoint};
use lmrepair_core::model::train::{train_items, TrainItem, TrainOptions, TrainReport};
use lmrepair_core::optimize::{record_surface_demo, OptimizerConfig, Rule, Surface, SurfaceDemo};
use lmrepair_core::patch::{RepairMode, DEFAULT_ALPHA, DEFAULT_CLAMP};
use lmrepair_core::repair::{
    detect_failures, expand_cases, repair_each, repair_multiple, FailureCase, RepairOptions,
    RepairReport,
};
use lmrepair_core::testbed::{generate, TestbedSpec};
use lmrepair_core::{Error, ModelConfig, TinyLM};

use table::Table;

/// Errors mapped onto process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidInput(_) | Error::InvalidState(_) => CliError::Usage(e.to_string()),
            _ => CliError::Io(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn require_file(path: &Path, what: &str) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

// ---------------------------------------------------------------- repair

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub checkpoint: PathBuf,
    pub dataset: PathBuf,
    pub rule: Rule,
    pub mode: RepairMode,
    pub sparsity: SparsityMode,
    pub layer_proportion: f64,
    /// neuron count; `None` means `⌈d_ffn/16⌉`
    pub budget: Option<usize>,
    /// fraction of the neurons in scope, instead of a count
    pub neuron_proportion: Option<f64>,
    pub alpha: f64,
    pub max_steps: usize,
    pub clamp: (f64, f64),
    pub mint_pool: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub revert_on_fail: bool,
    /// after repair, count dataset cases that were right before and fail now
    pub rescan: bool,
    /// repair only the first `limit` failures
    pub limit: Option<usize>,
}

impl RunConfig {
    pub fn new(checkpoint: impl Into<PathBuf>, dataset: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        let opt = OptimizerConfig::default();
        Self {
            checkpoint: checkpoint.into(),
            dataset: dataset.into(),
            rule: Rule::Star,
            mode: RepairMode::Single,
            sparsity: SparsityMode::LayerWise,
            layer_proportion: 0.5,
            budget: None,
            neuron_proportion: None,
            alpha: DEFAULT_ALPHA,
            max_steps: opt.max_steps,
            clamp: DEFAULT_CLAMP,
            mint_pool: opt.mint_candidate_pool,
            seed: 0,
            out_dir: out_dir.into(),
            revert_on_fail: false,
            rescan: false,
            limit: None,
        }
    }

    pub fn repair_options(&self, d_ffn: usize) -> RepairOptions {
        let budget = match (self.neuron_proportion, self.budget) {
            (Some(p), _) => Budget::Proportion(p),
            (None, Some(k)) => Budget::Count(k),
            (None, None) => Budget::Count(recommended_budget(d_ffn)),
        };
        RepairOptions {
            optimizer: OptimizerConfig {
                rule: self.rule,
                alpha: self.alpha,
                max_steps: self.max_steps,
                clamp: self.clamp,
                mint_candidate_pool: self.mint_pool,
                ..OptimizerConfig::default()
            },
            pattern: SparsityPattern {
                mode: self.sparsity,
                layer_proportion: self.layer_proportion,
                budget,
            },
            revert_on_fail: self.revert_on_fail,
        }
    }

    /// Checks options and input paths; runs before any model is loaded.
    pub fn validate(&self) -> CliResult<()> {
        if self.budget.is_some() && self.neuron_proportion.is_some() {
            return Err(usage("give either a neuron budget or a neuron proportion, not both"));
        }
        self.repair_options(16).validate()?;
        require_file(&self.checkpoint, "checkpoint")?;
        require_file(&self.dataset, "dataset")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepairSummary {
    pub rule: Rule,
    pub mode: RepairMode,
    /// teacher-forced cases in the dataset
    pub cases: usize,
    pub failures: usize,
    /// failures handed to the repair
    pub repaired: usize,
    pub solved: usize,
    /// `solved / repaired`, 1 when nothing needed repair
    pub accuracy: f64,
    pub steps: usize,
    pub neurons_patched: usize,
    pub clamped_entries: usize,
    pub max_drift: f64,
    pub reverted: usize,
    /// previously correct cases that fail after repair
    pub regressions: Option<usize>,
    pub options: RepairOptions,
}

#[derive(Clone, Debug)]
pub struct RepairRun {
    pub summary: RepairSummary,
    pub reports: Vec<RepairReport>,
    /// mean over reports; not serialized
    pub mean_wall_time: f64,
    pub repaired_model: Option<TinyLM>,
}

impl RepairRun {
    pub fn all_solved(&self) -> bool {
        self.summary.solved == self.summary.repaired
    }

    pub fn table(&self) -> String {
        let s = &self.summary;
        let mut t = Table::new(&["rule", "mode", "failures", "solved", "accuracy", "steps", "neurons", "max drift", "s/repair"]);
        t.row(&[
            s.rule.to_string(),
            mode_name(s.mode).to_string(),
            s.repaired.to_string(),
            s.solved.to_string(),
            format!("{:.3}", s.accuracy),
            s.steps.to_string(),
            s.neurons_patched.to_string(),
            format!("{:.4}", s.max_drift),
            format!("{:.4}", self.mean_wall_time),
        ]);
        t.render()
    }
}

pub fn mode_name(m: RepairMode) -> &'static str {
    match m {
        RepairMode::Single => "single",
        RepairMode::Multiple => "multiple",
    }
}

fn regressions(before: &[FailureCase], model: &TinyLM, dataset: &[Example]) -> lmrepair_core::Result<usize> {
    let failing: BTreeSet<&str> = before
        .iter()
        .filter(|c| c.argmax != c.target)
        .map(|c| c.id.as_str())
        .collect();
    Ok(detect_failures(model, dataset)?
        .iter()
        .filter(|c| !failing.contains(c.id.as_str()))
        .count())
}

/// Repairs the failures of `dataset` under `opts` without touching disk.
/// Single mode repairs each failure on its own copy of `model`; multiple
/// mode repairs them jointly and returns the repaired model.
pub fn run_repair(
    model: &TinyLM,
    dataset: &[Example],
    opts: &RepairOptions,
    mode: RepairMode,
    limit: Option<usize>,
    rescan: bool,
) -> CliResult<RepairRun> {
    opts.validate()?;
    let all = expand_cases(model, dataset)?;
    let mut failures: Vec<FailureCase> = all.iter().filter(|c| c.argmax != c.target).cloned().collect();
    let n_failures = failures.len();
    if let Some(k) = limit {
        failures.truncate(k);
    }

    let mut regressed = 0;
    let mut repaired_model = None;
    let reports = match mode {
        RepairMode::Single => repair_each(model, &failures, opts, |_, m, _| {
            if rescan {
                regressed += regressions(&all, m, dataset)?;
            }
            Ok(())
        })?,
        RepairMode::Multiple if failures.is_empty() => Vec::new(),
        RepairMode::Multiple => {
            let mut m = model.clone();
            let r = repair_multiple(&mut m, &failures, opts)?;
            if rescan {
                regressed = regressions(&all, &m, dataset)?;
            }
            repaired_model = Some(m);
            vec![r]
        }
    };

    let solved: usize = reports.iter().map(|r| r.cases.iter().filter(|c| c.solved).count()).sum();
    let neurons: BTreeSet<_> = reports.iter().flat_map(|r| r.neurons_patched.iter().copied()).collect();
    let summary = RepairSummary {
        rule: opts.optimizer.rule,
        mode,
        cases: all.len(),
        failures: n_failures,
        repaired: failures.len(),
        solved,
        accuracy: if failures.is_empty() { 1.0 } else { solved as f64 / failures.len() as f64 },
        steps: reports.iter().map(|r| r.steps_used).sum(),
        neurons_patched: neurons.len(),
        clamped_entries: reports.iter().map(|r| r.clamped_entries).sum(),
        max_drift: reports.iter().map(|r| r.max_drift).fold(0.0, f64::max),
        reverted: reports.iter().filter(|r| r.reverted).count(),
        regressions: rescan.then_some(regressed),
        options: opts.clone(),
    };
    let mean_wall_time = if reports.is_empty() {
        0.0
    } else {
        reports.iter().map(|r| r.wall_time_seconds).sum::<f64>() / reports.len() as f64
    };
    Ok(RepairRun {
        summary,
        reports,
        mean_wall_time,
        repaired_model,
    })
}

/// Detects and repairs the dataset's failures. Writes `reports.jsonl` and
/// `summary.json` into the output directory, plus `repaired.ckpt` in
/// multiple mode.
pub fn cmd_repair(cfg: &RunConfig) -> CliResult<RepairRun> {
    cfg.validate()?;
    let model = load_checkpoint(&cfg.checkpoint)?;
    let dataset = read_jsonl(&cfg.dataset)?;
    let opts = cfg.repair_options(model.config().d_ffn);
    let run = run_repair(&model, &dataset, &opts, cfg.mode, cfg.limit, cfg.rescan)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_jsonl(cfg.out_dir.join("reports.jsonl"), &run.reports)?;
    write_json(&cfg.out_dir.join("summary.json"), &run.summary)?;
    if let Some(m) = &run.repaired_model {
        save_checkpoint(m, cfg.out_dir.join("repaired.ckpt"))?;
    }
    Ok(run)
}

// ----------------------------------------------------------------- sweep

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    LayerProportion,
    NeuronBudget,
    Mode,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::LayerProportion => "layer_proportion",
            SweepAxis::NeuronBudget => "neuron_budget",
            SweepAxis::Mode => "mode",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub point: String,
    /// the `⌈d_ffn/16⌉` budget
    pub recommended: bool,
    pub repaired: usize,
    pub solved: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub rule: Rule,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn table(&self) -> String {
        let mut t = Table::new(&["point", "failures", "solved", "accuracy", ""]);
        for r in &self.rows {
            t.row(&[
                r.point.clone(),
                r.repaired.to_string(),
                r.solved.to_string(),
                format!("{:.3}", r.accuracy),
                if r.recommended { "recommended".into() } else { String::new() },
            ]);
        }
        t.render()
    }
}

fn default_points(axis: SweepAxis, d_ffn: usize) -> Vec<String> {
    match axis {
        SweepAxis::LayerProportion => ["0.25", "0.5", "0.75", "1"].map(String::from).to_vec(),
        SweepAxis::NeuronBudget => {
            let mut ks: Vec<usize> = vec![1, 4, recommended_budget(d_ffn), 32, 64];
            ks.retain(|&k| k <= d_ffn);
            ks.sort_unstable();
            ks.dedup();
            ks.iter().map(|k| k.to_string()).collect()
        }
        SweepAxis::Mode => vec!["single".into(), "multiple".into()],
    }
}

/// Repair accuracy at each point of one sparsity axis; the other settings
/// come from `cfg`. Writes `sweep.json`.
pub fn cmd_sweep(cfg: &RunConfig, axis: SweepAxis, points: &[String]) -> CliResult<SweepTable> {
    cfg.validate()?;
    let mut variants = Vec::new();
    let given: Vec<String> = points.to_vec();
    // parse every point before loading anything
    let parse_f = |p: &str| p.parse::<f64>().map_err(|_| usage(format!("bad sweep point {p:?}")));
    for p in &given {
        let mut c = cfg.clone();
        match axis {
            SweepAxis::LayerProportion => c.layer_proportion = parse_f(p)?,
            SweepAxis::NeuronBudget => {
                c.budget = Some(p.parse().map_err(|_| usage(format!("bad neuron budget {p:?}")))?);
                c.neuron_proportion = None;
            }
            SweepAxis::Mode => c.mode = parse_mode(p)?,
        }
        c.validate()?;
        variants.push((p.clone(), c));
    }

    let model = load_checkpoint(&cfg.checkpoint)?;
    let d_ffn = model.config().d_ffn;
    if variants.is_empty() {
        return cmd_sweep(cfg, axis, &default_points(axis, d_ffn));
    }
    let dataset = read_jsonl(&cfg.dataset)?;
    let mut rows = Vec::new();
    for (p, c) in &variants {
        let opts = c.repair_options(d_ffn);
        let run = run_repair(&model, &dataset, &opts, c.mode, c.limit, false)?;
        rows.push(SweepRow {
            point: p.clone(),
            recommended: axis == SweepAxis::NeuronBudget && opts.pattern.budget == Budget::Count(recommended_budget(d_ffn)),
            repaired: run.summary.repaired,
            solved: run.summary.solved,
            accuracy: run.summary.accuracy,
        });
    }
    let table = SweepTable {
        axis,
        rule: cfg.rule,
        rows,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_json(&cfg.out_dir.join("sweep.json"), &table)?;
    Ok(table)
}

pub fn parse_mode(s: &str) -> CliResult<RepairMode> {
    match s {
        "single" => Ok(RepairMode::Single),
        "multiple" => Ok(RepairMode::Multiple),
        other => Err(usage(format!("unknown mode {other:?} (single, multiple)"))),
    }
}

// ---------------------------------------------------------- side effects

/// Prefixes used to paraphrase a prompt into related probes.
pub const PARAPHRASE_PREFIXES: [&str; 9] = ["# ", "> ", "  ", "- ", "* ", "// ", "; ", "\t", "| "];

/// Synthesizes probe groups for every dataset line: related probes put a
/// paraphrase prefix in front of the prompt and keep the target; unrelated
/// probes are other dataset entries with a different target.
pub fn make_probes(
    dataset: &[Example],
    n_related: usize,
    n_unrelated: usize,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut related = Vec::new();
    let mut unrelated = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        let line = i + 1;
        for prefix in PARAPHRASE_PREFIXES.iter().cycle().take(n_related) {
            let mut p = Example::new(format!("{prefix}{}", ex.prompt), ex.target.clone());
            p.for_line = Some(line);
            related.push(p);
        }
        let others: Vec<&Example> = dataset.iter().filter(|o| o.target != ex.target).collect();
        for o in others.choose_multiple(&mut rng, n_unrelated) {
            let mut p = Example::new(o.prompt.clone(), o.target.clone());
            p.for_line = Some(line);
            unrelated.push(p);
        }
    }
    (related, unrelated)
}

#[derive(Clone, Debug)]
pub struct SideEffectRun {
    pub report: SideEffectReport,
    pub repaired: usize,
    pub solved: usize,
}

impl SideEffectRun {
    pub fn table(&self, rule: Rule) -> String {
        let r = &self.report;
        let mut t = Table::new(&["rule", "solved", "G", "S", "GSH", "related MAE", "related RMSE", "unrelated MAE", "unrelated RMSE"]);
        t.row(&[
            rule.to_string(),
            format!("{}/{}", self.solved, self.repaired),
            format!("{:.4}", r.g),
            format!("{:.4}", r.s),
            format!("{:.4}", r.gsh),
            format!("{:.5}", r.related.mae),
            format!("{:.5}", r.related.rmse),
            format!("{:.5}", r.unrelated.mae),
            format!("{:.5}", r.unrelated.rmse),
        ]);
        t.render()
    }
}

fn probes_of(examples: &[Example], tag: &str, line: usize) -> Result<Vec<Probe>, Error> {
    examples
        .iter()
        .enumerate()
        .filter(|(_, e)| e.for_line.is_none_or(|l| l == line))
        .map(|(i, e)| e.probe(format!("{tag}{}", i + 1)))
        .collect()
}

/// Repairs each failure on its own and measures the gap changes of the
/// probes attached to its dataset line (probes without a line apply to
/// every failure). Writes `side_effects.json`.
pub fn side_effects_run(
    model: &TinyLM,
    dataset: &[Example],
    related: &[Example],
    unrelated: &[Example],
    opts: &RepairOptions,
    limit: Option<usize>,
) -> CliResult<SideEffectRun> {
    if related.is_empty() {
        return Err(usage("related probe set is empty"));
    }
    if unrelated.is_empty() {
        return Err(usage("unrelated probe set is empty"));
    }
    let mut failures = detect_failures(model, dataset)?;
    if let Some(k) = limit {
        failures.truncate(k);
    }
    let mut changes = Vec::new();
    let reports = repair_each(model, &failures, opts, |c, m, _| {
        changes.extend(gap_changes(model, m, &probes_of(related, "related:", c.line)?, Relation::Related)?);
        changes.extend(gap_changes(model, m, &probes_of(unrelated, "unrelated:", c.line)?, Relation::Unrelated)?);
        Ok(())
    })?;
    let report = side_effects_from_changes(changes)?;
    Ok(SideEffectRun {
        report,
        repaired: reports.len(),
        solved: reports.iter().filter(|r| r.solved).count(),
    })
}

pub fn cmd_side_effects(
    cfg: &RunConfig,
    related: Option<&Path>,
    unrelated: Option<&Path>,
    make: bool,
) -> CliResult<SideEffectRun> {
    cfg.validate()?;
    if !make {
        match (related, unrelated) {
            (Some(r), Some(u)) => {
                require_file(r, "related probe file")?;
                require_file(u, "unrelated probe file")?;
            }
            _ => return Err(usage("give --related and --unrelated, or --make-probes")),
        }
    }
    let model = load_checkpoint(&cfg.checkpoint)?;
    let dataset = read_jsonl(&cfg.dataset)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let (rel, unrel) = if make {
        let (r, u) = make_probes(&dataset, 9, 14, cfg.seed);
        write_jsonl(cfg.out_dir.join("related.jsonl"), &r)?;
        write_jsonl(cfg.out_dir.join("unrelated.jsonl"), &u)?;
        (r, u)
    } else {
        (read_jsonl(related.unwrap())?, read_jsonl(unrelated.unwrap())?)
    };
    let opts = cfg.repair_options(model.config().d_ffn);
    let run = side_effects_run(&model, &dataset, &rel, &unrel, &opts, cfg.limit)?;
    write_json(&cfg.out_dir.join("side_effects.json"), &run.report)?;
    Ok(run)
}

// ----------------------------------------------------------------- train

/// Model shape and optimizer settings, as stored in `train.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainOptions,
}

impl Default for TrainSetup {
    fn default() -> Self {
        let spec = TestbedSpec::default();
        Self {
            model: spec.config,
            train: spec.train,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub corpus: PathBuf,
    pub out: PathBuf,
    pub setup: TrainSetup,
    /// score every token instead of the targets only
    pub full_sequence: bool,
}

pub fn read_setup(path: &Path) -> CliResult<TrainSetup> {
    require_file(path, "training config")?;
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

/// Trains a fresh model on a JSONL corpus and writes its checkpoint.
pub fn cmd_train(cfg: &TrainConfig) -> CliResult<TrainReport> {
    cfg.setup.model.validate()?;
    if cfg.setup.train.batch_size == 0 {
        return Err(usage("batch size must be at least 1"));
    }
    require_file(&cfg.corpus, "corpus")?;
    let corpus = read_jsonl(&cfg.corpus)?;
    let items: Vec<TrainItem> = corpus
        .iter()
        .map(|e| {
            if cfg.full_sequence {
                TrainItem::full(e.sequence())
            } else {
                TrainItem::completion(&e.prompt_tokens(), &e.target_tokens())
            }
        })
        .collect();
    let (model, report) = train_items(cfg.setup.model.clone(), &items, &cfg.setup.train)?;
    if let Some(dir) = cfg.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_checkpoint(&model, &cfg.out)?;
    Ok(report)
}

// ---------------------------------------------------------------- bundle

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub spec: TestbedSpec,
    pub corpus: usize,
    pub dataset: usize,
    pub related: usize,
    pub unrelated: usize,
    pub checkpoint: Option<String>,
}

/// Writes the seeded key→value testbed: `corpus.jsonl`, `dataset.jsonl`,
/// `related.jsonl`, `unrelated.jsonl` and `train.json`; with `train` also
/// `model.ckpt`.
pub fn cmd_bundle(out: &Path, spec: &TestbedSpec, train: bool) -> CliResult<BundleManifest> {
    spec.config.validate()?;
    let tb = generate(spec);
    std::fs::create_dir_all(out)?;
    write_jsonl(out.join("corpus.jsonl"), &tb.corpus)?;
    write_jsonl(out.join("dataset.jsonl"), &tb.dataset)?;
    write_jsonl(out.join("related.jsonl"), &tb.related)?;
    write_jsonl(out.join("unrelated.jsonl"), &tb.unrelated)?;
    write_json(
        &out.join("train.json"),
        &TrainSetup {
            model: spec.config.clone(),
            train: spec.train.clone(),
        },
    )?;
    let checkpoint = if train {
        let (m, _) = tb.train()?;
        save_checkpoint(&m, out.join("model.ckpt"))?;
        Some("model.ckpt".to_string())
    } else {
        None
    };
    let manifest = BundleManifest {
        spec: spec.clone(),
        corpus: tb.corpus.len(),
        dataset: tb.dataset.len(),
        related: tb.related.len(),
        unrelated: tb.unrelated.len(),
        checkpoint,
    };
    write_json(&out.join("bundle.json"), &manifest)?;
    Ok(manifest)
}

// ----------------------------------------------------------------- trace

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceKind {
    /// shallow well near the origin, deep well further out
    Canonical,
    /// single quadratic basin
    Bowl,
}

/// Runs the sign rule and plain gradient descent on a 2-D surface and
/// writes grid, contour levels and both trajectories as JSON.
pub fn cmd_trace(kind: SurfaceKind, steps: usize, step_size: f64, out: Option<&Path>) -> CliResult<SurfaceDemo> {
    let surface = match kind {
        SurfaceKind::Canonical => Surface::canonical(),
        SurfaceKind::Bowl => Surface::bowl(),
    };
    let demo = record_surface_demo(&surface, &[Rule::Star, Rule::Sgd], steps, step_size)?;
    if let Some(path) = out {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        write_json(path, &demo)?;
    }
    Ok(demo)
}

pub fn trace_table(demo: &SurfaceDemo) -> String {
    let mut t = Table::new(&["rule", "final x", "final y", "final loss"]);
    for tr in &demo.trajectories {
        let (x, y, l) = *tr.points.last().expect("trajectory starts at the origin");
        t.row(&[tr.rule.to_string(), format!("{x:.4}"), format!("{y:.4}"), format!("{l:.4}")]);
    }
    t.render()
}
