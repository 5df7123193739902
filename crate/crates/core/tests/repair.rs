//! Failure detection and end-to-end repair sessions.

mod common;

use lmrepair_core::data::Example;
use lmrepair_core::model::GradientTrace;
use lmrepair_core::optimize::Rule;
use lmrepair_core::patch::{frozen_fingerprints, RepairMode};
use lmrepair_core::repair::{
    detect_failures, expand_cases, repair_multiple, repair_single, RepairOptions,
};
use lmrepair_core::TinyLM;

use common::fixture;

fn opts(rule: Rule) -> RepairOptions {
    RepairOptions::new(rule, fixture().model.config().d_ffn)
}

fn argmax_after(model: &TinyLM, tokens: &[usize]) -> usize {
    model.forward(tokens).unwrap().argmax()
}

#[test]
fn failures_have_negative_gaps_and_stable_order() {
    let f = fixture();
    assert!(f.failures.len() >= 100, "only {} failures", f.failures.len());
    for c in &f.failures {
        let t = f.model.forward(&c.tokens).unwrap();
        assert!(t.prob(c.target) < t.prob(c.argmax));
        assert!(c.gap < 0.0 && c.argmax != c.target);
    }
    assert!(f.failures.windows(2).all(|w| w[0].line < w[1].line));
    assert_eq!(detect_failures(&f.model, &f.testbed.dataset).unwrap(), f.failures);
}

#[test]
fn correct_predictions_yield_no_failures() {
    let f = fixture();
    let ok: Vec<Example> = f
        .testbed
        .unrelated
        .iter()
        .filter(|e| argmax_after(&f.model, &e.prompt_tokens()) == e.target_tokens()[0])
        .take(20)
        .cloned()
        .collect();
    assert!(!ok.is_empty());
    assert!(detect_failures(&f.model, &ok).unwrap().is_empty());
    assert!(detect_failures(&f.model, &[Example::new("A", "")]).is_err());
}

#[test]
fn teacher_forcing_expands_multi_token_targets() {
    let f = fixture();
    let prompt = Example::new("@#Q", "").prompt_tokens();
    let first = argmax_after(&f.model, &prompt);
    assert!((b'a' as usize..=b'z' as usize).contains(&first));
    let mut seq = prompt.clone();
    seq.push(first);
    let wrong1 = ['x', 'y'].into_iter().find(|&c| c as usize != argmax_after(&f.model, &seq)).unwrap();
    seq.push(wrong1 as usize);
    let wrong2 = ['x', 'y'].into_iter().find(|&c| c as usize != argmax_after(&f.model, &seq)).unwrap();
    let target: String = [first as u8 as char, wrong1, wrong2].iter().collect();
    let ex = Example::new("@#Q", target);

    assert_eq!(expand_cases(&f.model, std::slice::from_ref(&ex)).unwrap().len(), 3);
    let cases = detect_failures(&f.model, &[ex]).unwrap();
    assert_eq!(cases.len(), 2);
    assert_eq!((cases[0].id.as_str(), cases[1].id.as_str()), ("1.1", "1.2"));
    assert_eq!(cases[0].tokens, [prompt.as_slice(), &[first]].concat());
    assert_eq!(cases[1].tokens.len(), prompt.len() + 2);
    assert_eq!(cases[1].target, wrong2 as usize);
}

#[test]
fn solved_input_is_a_no_op() {
    let f = fixture();
    let ex = f
        .testbed
        .unrelated
        .iter()
        .find(|e| argmax_after(&f.model, &e.prompt_tokens()) == e.target_tokens()[0])
        .unwrap();
    let case = expand_cases(&f.model, std::slice::from_ref(ex)).unwrap().remove(0);
    for rule in [Rule::Star, Rule::Sgd, Rule::Mint] {
        let mut m = f.model.clone();
        let r = repair_single(&mut m, &case, &opts(rule)).unwrap();
        assert!(r.solved && r.noop, "{rule}");
        assert_eq!(r.steps_used, 0);
        assert_eq!(m.params(), f.model.params());
    }
}

#[test]
fn zero_max_steps_is_rejected() {
    let f = fixture();
    let mut o = opts(Rule::Star);
    o.optimizer.max_steps = 0;
    let mut m = f.model.clone();
    assert!(repair_single(&mut m, &f.failures[0], &o).is_err());
    assert!(repair_multiple(&mut m, &[], &opts(Rule::Star)).is_err());
}

#[test]
fn batch_of_one_matches_single_bit_for_bit() {
    let f = fixture();
    for rule in [Rule::Star, Rule::Sgd, Rule::Mint] {
        let case = &f.failures[3];
        let mut a = f.model.clone();
        let mut b = f.model.clone();
        let ra = repair_single(&mut a, case, &opts(rule)).unwrap();
        let mut rb = repair_multiple(&mut b, std::slice::from_ref(case), &opts(rule)).unwrap();
        assert_eq!(a.params(), b.params(), "{rule}");
        assert_eq!((ra.mode, rb.mode), (RepairMode::Single, RepairMode::Multiple));
        rb.mode = RepairMode::Single;
        rb.wall_time_seconds = ra.wall_time_seconds;
        assert_eq!(ra, rb);
    }
}

#[test]
fn duplicated_failure_doubles_gradients_not_the_patch() {
    let f = fixture();
    let case = &f.failures[4];
    let g = f.model.backward(&case.tokens, case.target).unwrap();
    let two = GradientTrace::sum(&[g.clone(), g.clone()]).unwrap();
    for (a, b) in g.ffn_w2.iter().zip(&two.ffn_w2) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert_eq!(2.0 * x, *y);
        }
    }
    let mut single = f.model.clone();
    let mut double = f.model.clone();
    let rs = repair_single(&mut single, case, &opts(Rule::Star)).unwrap();
    let rd = repair_multiple(&mut double, &[case.clone(), case.clone()], &opts(Rule::Star)).unwrap();
    assert_eq!(rs.steps_used, rd.steps_used);
    assert_eq!(rs.neurons_patched, rd.neurons_patched);
    for (a, b) in single.params().blocks.iter().zip(&double.params().blocks) {
        for (x, y) in a.ffn_w2.as_slice().iter().zip(b.ffn_w2.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn joint_batch_solves_at_least_as_many_as_succession() {
    let f = fixture();
    let cases = &f.failures[..5];
    let solved = |m: &TinyLM| cases.iter().filter(|c| argmax_after(m, &c.tokens) == c.target).count();

    let mut seq = f.model.clone();
    for c in cases {
        repair_single(&mut seq, c, &opts(Rule::Star)).unwrap();
    }
    let mut joint = f.model.clone();
    let r = repair_multiple(&mut joint, cases, &opts(Rule::Star)).unwrap();
    let (s, j) = (solved(&seq), solved(&joint));
    eprintln!("succession {s}/5, joint {j}/5 in {} steps", r.steps_used);
    assert!(j >= s);
}

#[test]
fn reports_are_sound_local_and_deterministic() {
    let f = fixture();
    let frozen = frozen_fingerprints(&f.model);
    for rule in [Rule::Star, Rule::Sgd, Rule::Mint] {
        for case in &f.failures[..6] {
            let mut m = f.model.clone();
            let r = repair_single(&mut m, case, &opts(rule)).unwrap();
            assert!(r.steps_used <= 10);
            assert_eq!(r.solved, argmax_after(&m, &case.tokens) == case.target);
            assert_eq!(frozen_fingerprints(&m), frozen);
            assert!(r.max_drift <= 0.1 + 1e-12);
            let mut again = f.model.clone();
            let r2 = repair_single(&mut again, case, &opts(rule)).unwrap();
            assert_eq!(serde_json::to_string(&r).unwrap(), serde_json::to_string(&r2).unwrap());
            assert!(!serde_json::to_string(&r).unwrap().contains("wall_time"));
        }
    }
}

#[test]
fn revert_on_fail_restores_the_weights() {
    let f = fixture();
    let mut o = opts(Rule::Star);
    o.optimizer.max_steps = 1;
    o.revert_on_fail = true;
    let case = f
        .failures
        .iter()
        .max_by(|a, b| b.gap.total_cmp(&a.gap))
        .unwrap();
    let mut m = f.model.clone();
    let r = repair_single(&mut m, case, &o).unwrap();
    assert!(!r.solved && r.reverted);
    assert_eq!(m.params(), f.model.params());
    assert_eq!(r.max_drift, 0.0);
    assert_eq!(r.cases[0].gap_after, r.cases[0].gap_before);
}
