mod common;

use std::path::Path;
use std::process::Command;

use common::{assert_json_close, bundle, out_dir};
use lmrepair_cli::{
    cmd_repair, cmd_side_effects, cmd_sweep, cmd_trace, cmd_train, make_probes, RunConfig,
    SurfaceKind, SweepAxis, TrainConfig, TrainSetup,
};
use lmrepair_core::data::{write_jsonl, Example};
use lmrepair_core::evaluate::generalization;
use lmrepair_core::model::checkpoint::load_checkpoint;
use lmrepair_core::model::train::TrainOptions;
use lmrepair_core::optimize::{record_surface_demo, Rule, Surface};
use lmrepair_core::patch::{frozen_fingerprints, RepairMode};
use lmrepair_core::repair::expand_cases;
use lmrepair_core::ModelConfig;
use serde_json::Value;

fn lmrepair(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lmrepair")).args(args).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn config(out: &Path) -> RunConfig {
    let b = bundle();
    RunConfig::new(b.checkpoint(), b.dataset(), out)
}

/// Compares against a committed file; `LMREPAIR_BLESS=1` rewrites it.
fn golden(name: &str, got: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("LMREPAIR_BLESS").is_some() {
        std::fs::write(&path, serde_json::to_string_pretty(got).unwrap() + "\n").unwrap();
    }
    assert_json_close(got, &read_json(&path), 1e-9, name);
}

#[test]
fn star_defaults_match_the_golden_summary() {
    let out = out_dir("golden");
    let run = cmd_repair(&config(out.path())).unwrap();
    assert_eq!(run.summary.rule, Rule::Star);
    assert_eq!(run.reports.len(), run.summary.repaired);
    golden("star_summary.json", &read_json(&out.path().join("summary.json")));
}

#[test]
fn empty_failure_set_reports_full_accuracy() {
    let b = bundle();
    let cases = expand_cases(&b.model, &b.testbed.dataset).unwrap();
    let correct: Vec<Example> = cases
        .iter()
        .filter(|c| c.argmax == c.target)
        .map(|c| b.testbed.dataset[c.line - 1].clone())
        .collect();
    assert!(!correct.is_empty());
    let out = out_dir("empty");
    let data = out.path().join("correct.jsonl");
    write_jsonl(&data, &correct).unwrap();
    let mut cfg = config(out.path());
    cfg.dataset = data.clone();
    let run = cmd_repair(&cfg).unwrap();
    assert_eq!((run.summary.failures, run.summary.repaired, run.summary.solved), (0, 0, 0));
    assert_eq!(run.summary.accuracy, 1.0);
    assert!(run.all_solved());
    assert_eq!(std::fs::read(out.path().join("reports.jsonl")).unwrap(), b"");

    let o = lmrepair(&[
        "repair",
        "--checkpoint",
        b.checkpoint().to_str().unwrap(),
        "--dataset",
        data.to_str().unwrap(),
        "--out-dir",
        out.path().join("bin").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn unknown_rule_is_a_usage_error() {
    let b = bundle();
    let o = lmrepair(&[
        "repair",
        "--checkpoint",
        b.checkpoint().to_str().unwrap(),
        "--dataset",
        b.dataset().to_str().unwrap(),
        "--rule",
        "adam",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("adam"));
}

#[test]
fn missing_inputs_exit_with_usage_code() {
    let out = out_dir("missing");
    let ckpt = out.path().join("m.ckpt");
    let o = lmrepair(&["train", "--corpus", "/nonexistent/corpus.jsonl", "--out", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corpus"));
    assert!(!ckpt.exists());

    let mut cfg = config(out.path());
    cfg.dataset = out.path().join("nope.jsonl");
    assert_eq!(cmd_repair(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn format_errors_exit_with_io_code() {
    let b = bundle();
    let out = out_dir("format");
    let bad = out.path().join("bad.ckpt");
    std::fs::write(&bad, b"not a checkpoint").unwrap();
    let o = lmrepair(&[
        "repair",
        "--checkpoint",
        bad.to_str().unwrap(),
        "--dataset",
        b.dataset().to_str().unwrap(),
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));

    let data = out.path().join("bad.jsonl");
    std::fs::write(&data, "{\"prompt\": \"x\"}\n").unwrap();
    let mut cfg = config(out.path());
    cfg.dataset = data;
    assert_eq!(cmd_repair(&cfg).unwrap_err().exit_code(), 3);
}

#[test]
fn unsolved_cases_exit_with_code_one() {
    let b = bundle();
    let out = out_dir("unsolved");
    let o = lmrepair(&[
        "repair",
        "--checkpoint",
        b.checkpoint().to_str().unwrap(),
        "--dataset",
        b.dataset().to_str().unwrap(),
        "--max-steps",
        "1",
        "--limit",
        "10",
        "--out-dir",
        out.path().to_str().unwrap(),
    ]);
    let summary = read_json(&out.path().join("summary.json"));
    let unsolved = summary["solved"] != summary["repaired"];
    assert!(unsolved, "one step should leave failures unsolved");
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("accuracy"));
}

fn small_setup(seed: u64) -> TrainSetup {
    TrainSetup {
        model: ModelConfig {
            d_model: 16,
            n_layers: 1,
            n_heads: 2,
            d_ffn: 32,
            max_seq: 16,
            seed,
            ..ModelConfig::default()
        },
        train: TrainOptions::new(40, 0.5),
    }
}

#[test]
fn training_is_seed_deterministic_and_lowers_loss() {
    let b = bundle();
    let out = out_dir("train");
    let corpus = out.path().join("corpus.jsonl");
    write_jsonl(&corpus, &b.testbed.corpus[..200]).unwrap();
    let run = |name: &str, seed: u64| {
        let path = out.path().join(name);
        let report = cmd_train(&TrainConfig {
            corpus: corpus.clone(),
            out: path.clone(),
            setup: small_setup(seed),
            full_sequence: false,
        })
        .unwrap();
        (report, std::fs::read(path).unwrap())
    };
    let (r1, a) = run("a.ckpt", 3);
    let (_, a2) = run("a2.ckpt", 3);
    let (_, c) = run("c.ckpt", 4);
    assert_eq!(a, a2);
    assert_ne!(a, c);
    assert!(r1.final_loss < r1.initial_loss, "{r1:?}");
}

#[test]
fn sweep_rows_are_the_requested_points() {
    let out = out_dir("sweep");
    let mut cfg = config(out.path());
    cfg.limit = Some(8);
    let budget = cmd_sweep(&cfg, SweepAxis::NeuronBudget, &[]).unwrap();
    let points: Vec<&str> = budget.rows.iter().map(|r| r.point.as_str()).collect();
    assert_eq!(points, ["1", "4", "16", "32", "64"]);
    let flagged: Vec<&str> = budget.rows.iter().filter(|r| r.recommended).map(|r| r.point.as_str()).collect();
    assert_eq!(flagged, ["16"]);

    let one = cmd_sweep(&cfg, SweepAxis::LayerProportion, &["0.5".into()]).unwrap();
    assert_eq!(one.rows.len(), 1);
    let direct = cmd_repair(&cfg).unwrap();
    assert_eq!(one.rows[0].accuracy, direct.summary.accuracy);
    assert_eq!(one.rows[0].solved, direct.summary.solved);
    assert_eq!(budget.rows[2].solved, direct.summary.solved);

    let modes = cmd_sweep(&cfg, SweepAxis::Mode, &["multiple".into(), "single".into()]).unwrap();
    assert_eq!(modes.rows.iter().map(|r| r.point.as_str()).collect::<Vec<_>>(), ["multiple", "single"]);
    assert_eq!(cmd_sweep(&cfg, SweepAxis::Mode, &["both".into()]).unwrap_err().exit_code(), 2);
    assert!(read_json(&out.path().join("sweep.json"))["rows"].is_array());
}

#[test]
fn related_probes_equal_to_the_repair_data_measure_direct_success() {
    let b = bundle();
    let out = out_dir("direct");
    let related: Vec<Example> = b
        .testbed
        .dataset
        .iter()
        .enumerate()
        .map(|(i, e)| Example {
            for_line: Some(i + 1),
            ..e.clone()
        })
        .collect();
    let rel = out.path().join("related.jsonl");
    write_jsonl(&rel, &related).unwrap();
    let mut cfg = config(out.path());
    cfg.limit = Some(10);
    let se = cmd_side_effects(&cfg, Some(&rel), Some(&b.path("unrelated.jsonl")), false).unwrap();
    let run = cmd_repair(&cfg).unwrap();
    let deltas: Vec<f64> = run.reports.iter().map(|r| r.gap_after - r.gap_before).collect();
    assert_eq!(se.report.related.count, 10);
    assert!((se.report.g - generalization(&deltas)).abs() < 1e-12);
    assert_eq!(se.solved, run.summary.solved);
}

#[test]
fn empty_unrelated_file_is_a_validation_error() {
    let b = bundle();
    let out = out_dir("empty-unrel");
    let empty = out.path().join("unrelated.jsonl");
    std::fs::write(&empty, "").unwrap();
    let mut cfg = config(out.path());
    cfg.limit = Some(1);
    let err = cmd_side_effects(&cfg, Some(&b.path("related.jsonl")), Some(&empty), false).unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(err.to_string().contains("unrelated"));
}

#[test]
fn side_effects_match_the_golden_summary() {
    let b = bundle();
    let out = out_dir("se-golden");
    let mut cfg = config(out.path());
    cfg.limit = Some(20);
    let run = cmd_side_effects(&cfg, Some(&b.path("related.jsonl")), Some(&b.path("unrelated.jsonl")), false).unwrap();
    assert_eq!(run.report.related.count, 20 * 9);
    assert_eq!(run.report.unrelated.count, 20 * 14);
    let full = read_json(&out.path().join("side_effects.json"));
    let summary = serde_json::json!({
        "solved": run.solved,
        "g": full["g"],
        "s": full["s"],
        "gsh": full["gsh"],
        "related": full["related"],
        "unrelated": full["unrelated"],
    });
    golden("star_side_effects.json", &summary);
}

#[test]
fn synthesized_probes_follow_the_seed() {
    let data: Vec<Example> = (0..6)
        .map(|i| Example::new(format!("k{i}"), if i % 2 == 0 { "a" } else { "b" }))
        .collect();
    let (rel, unrel) = make_probes(&data, 9, 3, 1);
    assert_eq!(rel.len(), 6 * 9);
    assert_eq!(unrel.len(), 6 * 3);
    for p in &rel {
        let src = &data[p.for_line.unwrap() - 1];
        assert!(p.prompt.ends_with(&src.prompt) && p.prompt != src.prompt);
        assert_eq!(p.target, src.target);
    }
    for p in &unrel {
        assert_ne!(p.target, data[p.for_line.unwrap() - 1].target);
    }
    assert_eq!(make_probes(&data, 9, 3, 1), (rel.clone(), unrel.clone()));
    assert_ne!(make_probes(&data, 9, 3, 2).1, unrel);

    let b = bundle();
    let out = out_dir("probes");
    let run = |seed: &str, dir: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_lmrepair"))
            .env("REPAIR_SEED", seed)
            .args([
                "side-effects",
                "--checkpoint",
                b.checkpoint().to_str().unwrap(),
                "--dataset",
                b.dataset().to_str().unwrap(),
                "--make-probes",
                "--limit",
                "1",
                "--out-dir",
                out.path().join(dir).to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out.path().join(dir).join("unrelated.jsonl")).unwrap()
    };
    assert_eq!(run("3", "a"), run("3", "b"));
    assert_ne!(run("3", "a"), run("4", "c"));
}

#[test]
fn trace_writes_the_surface_demo() {
    let out = out_dir("trace");
    let path = out.path().join("demo.json");
    let demo = cmd_trace(SurfaceKind::Canonical, 100, 1e-2, Some(&path)).unwrap();
    let expected = record_surface_demo(&Surface::canonical(), &[Rule::Star, Rule::Sgd], 100, 1e-2).unwrap();
    assert_eq!(demo, expected);
    assert_json_close(&read_json(&path), &serde_json::to_value(&expected).unwrap(), 1e-12, "demo");
    assert!(demo.trajectories[0].final_loss() < demo.trajectories[1].final_loss());
    assert_eq!(cmd_trace(SurfaceKind::Bowl, 5, f64::NAN, None).unwrap_err().exit_code(), 2);
}

#[test]
fn repair_reports_are_byte_identical_across_runs() {
    let (a, b) = (out_dir("det-a"), out_dir("det-b"));
    for rule in [Rule::Star, Rule::Mint] {
        let mut ca = config(a.path());
        ca.limit = Some(15);
        ca.rule = rule;
        let mut cb = ca.clone();
        cb.out_dir = b.path().to_path_buf();
        cmd_repair(&ca).unwrap();
        cmd_repair(&cb).unwrap();
        for f in ["reports.jsonl", "summary.json"] {
            assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap());
        }
    }
}

#[test]
fn multiple_mode_writes_a_repaired_checkpoint() {
    let b = bundle();
    let out = out_dir("multi");
    let mut cfg = config(out.path());
    cfg.mode = RepairMode::Multiple;
    cfg.limit = Some(12);
    cfg.rescan = true;
    let run = cmd_repair(&cfg).unwrap();
    assert_eq!(run.reports.len(), 1);
    assert_eq!(run.reports[0].failure_ids.len(), 12);
    assert!(run.summary.regressions.is_some());
    let repaired = load_checkpoint(out.path().join("repaired.ckpt")).unwrap();
    assert_eq!(frozen_fingerprints(&repaired), frozen_fingerprints(&b.model));
    for case in &run.reports[0].cases {
        let c = expand_cases(&repaired, &b.testbed.dataset)
            .unwrap()
            .into_iter()
            .find(|c| c.id == case.id)
            .unwrap();
        assert_eq!(c.argmax == c.target, case.solved);
    }
}
