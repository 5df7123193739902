#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use lmrepair_core::data::write_jsonl;
use lmrepair_core::model::checkpoint::save_checkpoint;
use lmrepair_core::testbed::{generate, Testbed, TestbedSpec};
use lmrepair_core::TinyLM;
use tempfile::TempDir;

/// The default seeded testbed written out as CLI inputs.
pub struct Bundle {
    dir: TempDir,
    pub testbed: Testbed,
    pub model: TinyLM,
}

impl Bundle {
    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("model.ckpt")
    }

    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.jsonl")
    }
}

pub fn bundle() -> &'static Bundle {
    static B: OnceLock<Bundle> = OnceLock::new();
    B.get_or_init(|| {
        let tmp = Path::new(env!("CARGO_TARGET_TMPDIR"));
        let testbed = generate(&TestbedSpec::default());
        let model = testbed.train_cached(tmp).expect("testbed trains");
        let dir = tempfile::Builder::new().prefix("bundle").tempdir_in(tmp).unwrap();
        save_checkpoint(&model, dir.path().join("model.ckpt")).unwrap();
        write_jsonl(dir.path().join("dataset.jsonl"), &testbed.dataset).unwrap();
        write_jsonl(dir.path().join("related.jsonl"), &testbed.related).unwrap();
        write_jsonl(dir.path().join("unrelated.jsonl"), &testbed.unrelated).unwrap();
        Bundle { dir, testbed, model }
    })
}

pub fn out_dir(tag: &str) -> TempDir {
    tempfile::Builder::new()
        .prefix(tag)
        .tempdir_in(env!("CARGO_TARGET_TMPDIR"))
        .unwrap()
}

/// JSON equality with a tolerance on numbers.
pub fn assert_json_close(got: &serde_json::Value, want: &serde_json::Value, tol: f64, at: &str) {
    use serde_json::Value;
    match (got, want) {
        (Value::Number(a), Value::Number(b)) => {
            let (a, b) = (a.as_f64().unwrap(), b.as_f64().unwrap());
            assert!((a - b).abs() <= tol, "{at}: {a} vs {b}");
        }
        (Value::Array(a), Value::Array(b)) => {
            assert_eq!(a.len(), b.len(), "{at}: length");
            for (i, (x, y)) in a.iter().zip(b).enumerate() {
                assert_json_close(x, y, tol, &format!("{at}[{i}]"));
            }
        }
        (Value::Object(a), Value::Object(b)) => {
            let ka: Vec<_> = a.keys().collect();
            let kb: Vec<_> = b.keys().collect();
            assert_eq!(ka, kb, "{at}: keys");
            for (k, x) in a {
                assert_json_close(x, &b[k], tol, &format!("{at}.{k}"));
            }
        }
        _ => assert_eq!(got, want, "{at}"),
    }
}
