#![allow(dead_code)]

use std::path::Path;
use std::sync::OnceLock;

use lmrepair_core::repair::{detect_failures, FailureCase};
use lmrepair_core::testbed::{generate, Testbed, TestbedSpec};
use lmrepair_core::TinyLM;

pub struct Fixture {
    pub testbed: Testbed,
    pub model: TinyLM,
    pub failures: Vec<FailureCase>,
}

/// The default seeded testbed, trained once per build directory.
pub fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let testbed = generate(&TestbedSpec::default());
        let model = testbed
            .train_cached(Path::new(env!("CARGO_TARGET_TMPDIR")))
            .expect("testbed trains");
        let failures = detect_failures(&model, &testbed.dataset).unwrap();
        Fixture {
            testbed,
            model,
            failures,
        }
    })
}
