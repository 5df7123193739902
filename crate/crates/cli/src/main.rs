use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lmrepair_cli::{
    cmd_bundle, cmd_repair, cmd_side_effects, cmd_sweep, cmd_trace, cmd_train, mode_name, read_setup,
    trace_table, CliError, CliResult, RunConfig, SurfaceKind, SweepAxis, TrainConfig, TrainSetup,
};
use lmrepair_core::attribution::SparsityMode;
use lmrepair_core::optimize::Rule;
use lmrepair_core::patch::RepairMode;
use lmrepair_core::testbed::TestbedSpec;

/// Locate and patch the FFN neurons behind next-token prediction failures.
///
/// Exit codes: 0 success, 1 repair ran but unsolved cases remain,
/// 2 usage or configuration error, 3 I/O or format error.
#[derive(Parser)]
#[command(name = "lmrepair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a JSONL corpus of {"prompt", "target"} lines.
    Train(TrainArgs),
    /// Detect the dataset's failures and repair them.
    Repair(RepairArgs),
    /// Repair accuracy along one sparsity axis.
    Sweep(SweepArgs),
    /// Repair each failure and measure gap changes on probe sets.
    SideEffects(SideEffectArgs),
    /// Optimizer trajectories on a 2-D loss surface.
    Trace(TraceArgs),
    /// Write the seeded key→value testbed (corpus, dataset, probes).
    Bundle(BundleArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// output checkpoint
    #[arg(long)]
    out: PathBuf,
    /// JSON with "model" and "train" sections, as written by `bundle`
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// initialization and batching seed
    #[arg(long, env = "REPAIR_SEED")]
    seed: Option<u64>,
    /// score every token instead of the targets only
    #[arg(long)]
    full_sequence: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RuleArg {
    Star,
    Sgd,
    Mint,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Single,
    Multiple,
}

#[derive(Clone, Copy, ValueEnum)]
enum SparsityArg {
    /// top neurons within the layers ranked highest by occlusion
    Layer,
    /// top neurons over all layers
    Model,
}

#[derive(Args)]
struct RepairArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "star")]
    rule: RuleArg,
    /// single repairs each failure from the input checkpoint; multiple
    /// repairs them jointly and writes repaired.ckpt
    #[arg(long, value_enum, default_value = "single")]
    mode: ModeArg,
    #[arg(long, value_enum, default_value = "layer")]
    sparsity: SparsityArg,
    /// share of layers in scope for layer-wise sparsity
    #[arg(long, default_value_t = 0.5)]
    layer_proportion: f64,
    /// neurons patched per session [default: ceil(d_ffn/16)]
    #[arg(long, conflicts_with = "neuron_proportion")]
    budget: Option<usize>,
    /// share of the neurons in scope, instead of a count
    #[arg(long)]
    neuron_proportion: Option<f64>,
    #[arg(long, default_value_t = 1e-2)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    max_steps: usize,
    /// bound on any patched entry's drift from its original value
    #[arg(long, default_value_t = 0.1)]
    clamp: f64,
    /// candidates trial-patched per round by the mint rule
    #[arg(long, default_value_t = 10)]
    mint_pool: usize,
    #[arg(long, env = "REPAIR_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "repair-out")]
    out_dir: PathBuf,
    /// restore the original weights when a session ends unsolved
    #[arg(long)]
    revert_on_fail: bool,
    /// count previously correct dataset cases that fail after repair
    #[arg(long)]
    rescan: bool,
    /// repair only the first N failures
    #[arg(long)]
    limit: Option<usize>,
}

impl RepairArgs {
    fn config(&self) -> CliResult<RunConfig> {
        if !(self.clamp >= 0.0) {
            return Err(CliError::Usage(format!("clamp {} must be non-negative", self.clamp)));
        }
        let mut c = RunConfig::new(&self.checkpoint, &self.dataset, &self.out_dir);
        c.rule = match self.rule {
            RuleArg::Star => Rule::Star,
            RuleArg::Sgd => Rule::Sgd,
            RuleArg::Mint => Rule::Mint,
        };
        c.mode = match self.mode {
            ModeArg::Single => RepairMode::Single,
            ModeArg::Multiple => RepairMode::Multiple,
        };
        c.sparsity = match self.sparsity {
            SparsityArg::Layer => SparsityMode::LayerWise,
            SparsityArg::Model => SparsityMode::ModelWise,
        };
        c.layer_proportion = self.layer_proportion;
        c.budget = self.budget;
        c.neuron_proportion = self.neuron_proportion;
        c.alpha = self.alpha;
        c.max_steps = self.max_steps;
        c.clamp = (-self.clamp, self.clamp);
        c.mint_pool = self.mint_pool;
        c.seed = self.seed;
        c.revert_on_fail = self.revert_on_fail;
        c.rescan = self.rescan;
        c.limit = self.limit;
        Ok(c)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    LayerProportion,
    NeuronBudget,
    Mode,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    repair: RepairArgs,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// comma-separated points [default: a preset per axis]
    #[arg(long, value_delimiter = ',')]
    points: Vec<String>,
}

#[derive(Args)]
struct SideEffectArgs {
    #[command(flatten)]
    repair: RepairArgs,
    /// JSONL probes sharing a failure's target
    #[arg(long)]
    related: Option<PathBuf>,
    /// JSONL probes with other targets
    #[arg(long)]
    unrelated: Option<PathBuf>,
    /// synthesize 9 related and 14 unrelated probes per dataset line
    #[arg(long, conflicts_with_all = ["related", "unrelated"])]
    make_probes: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum SurfaceArg {
    Canonical,
    Bowl,
}

#[derive(Args)]
struct TraceArgs {
    #[arg(long, value_enum, default_value = "canonical")]
    surface: SurfaceArg,
    #[arg(long, default_value_t = 100)]
    steps: usize,
    #[arg(long, default_value_t = 1e-2)]
    step_size: f64,
    /// output JSON file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BundleArgs {
    #[arg(long)]
    out: PathBuf,
    /// data seed
    #[arg(long, env = "REPAIR_SEED", default_value_t = 7)]
    seed: u64,
    /// also train and write model.ckpt
    #[arg(long)]
    train: bool,
}

fn run(cli: Cli) -> CliResult<ExitCode> {
    match cli.command {
        Command::Train(a) => {
            let mut setup = match &a.config {
                Some(p) => read_setup(p)?,
                None => TrainSetup::default(),
            };
            if let Some(v) = a.steps {
                setup.train.steps = v;
            }
            if let Some(v) = a.lr {
                setup.train.lr = v;
            }
            if let Some(v) = a.batch_size {
                setup.train.batch_size = v;
            }
            if let Some(v) = a.weight_decay {
                setup.train.weight_decay = v;
            }
            if let Some(v) = a.seed {
                setup.model.seed = v;
            }
            let report = cmd_train(&TrainConfig {
                corpus: a.corpus,
                out: a.out.clone(),
                setup,
                full_sequence: a.full_sequence,
            })?;
            println!(
                "trained {} steps: loss {:.4} -> {:.4}, wrote {}",
                report.steps,
                report.initial_loss,
                report.final_loss,
                a.out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Repair(a) => {
            let cfg = a.config()?;
            let run = cmd_repair(&cfg)?;
            print!("{}", run.table());
            if let Some(r) = run.summary.regressions {
                println!("regressions: {r}");
            }
            println!("wrote {}", cfg.out_dir.display());
            Ok(if run.all_solved() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::Sweep(a) => {
            let cfg = a.repair.config()?;
            let axis = match a.axis {
                AxisArg::LayerProportion => SweepAxis::LayerProportion,
                AxisArg::NeuronBudget => SweepAxis::NeuronBudget,
                AxisArg::Mode => SweepAxis::Mode,
            };
            let table = cmd_sweep(&cfg, axis, &a.points)?;
            println!("{} sweep, rule {}, mode {}", axis.name(), cfg.rule, mode_name(cfg.mode));
            print!("{}", table.table());
            Ok(ExitCode::SUCCESS)
        }
        Command::SideEffects(a) => {
            let cfg = a.repair.config()?;
            let run = cmd_side_effects(&cfg, a.related.as_deref(), a.unrelated.as_deref(), a.make_probes)?;
            print!("{}", run.table(cfg.rule));
            Ok(ExitCode::SUCCESS)
        }
        Command::Trace(a) => {
            let kind = match a.surface {
                SurfaceArg::Canonical => SurfaceKind::Canonical,
                SurfaceArg::Bowl => SurfaceKind::Bowl,
            };
            let demo = cmd_trace(kind, a.steps, a.step_size, a.out.as_deref())?;
            print!("{}", trace_table(&demo));
            Ok(ExitCode::SUCCESS)
        }
        Command::Bundle(a) => {
            let spec = TestbedSpec {
                seed: a.seed,
                ..TestbedSpec::default()
            };
            let m = cmd_bundle(&a.out, &spec, a.train)?;
            println!(
                "wrote {}: {} corpus, {} dataset, {} related, {} unrelated lines",
                a.out.display(),
                m.corpus,
                m.dataset,
                m.related,
                m.unrelated
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
