//! Synthetic key→value corpus that manufactures near-tie failures.
//!
//! Every prompt is a short run of filler symbols followed by a key
//! character; the next token is a value letter. Each key has a majority
//! value (seen with probability `p_major`) and a minority value. A trained
//! model predicts the majority, so prompts whose ground truth is the
//! minority are failures with a moderate negative gap. Related probes
//! share the failing key and its minority target under different filler;
//! unrelated probes are other keys with their majority targets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use std::path::{Path, PathBuf};

use crate::data::Example;
use crate::error::Result;
use crate::model::checkpoint::{load_checkpoint_with_config, save_checkpoint};
use crate::model::train::{train_items, TrainItem, TrainOptions, TrainReport};
use crate::model::{ModelConfig, TinyLM};

const KEYS: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const VALUES: &str = "abcdefghijklmnopqrstuvwxyz";
const FILLER: &str = "~!@#$%^&*-+=<>?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    pub n_keys: usize,
    pub train_examples_per_key: usize,
    pub dataset_prompts_per_key: usize,
    pub related_per_failure: usize,
    pub unrelated_per_failure: usize,
    pub max_filler: usize,
    pub p_major: (f64, f64),
    pub seed: u64,
    pub config: ModelConfig,
    pub train: TrainOptions,
}

impl Default for TestbedSpec {
    fn default() -> Self {
        Self {
            n_keys: 36,
            train_examples_per_key: 400,
            dataset_prompts_per_key: 4,
            related_per_failure: 9,
            unrelated_per_failure: 14,
            max_filler: 4,
            p_major: (0.5, 0.6),
            seed: 7,
            config: ModelConfig {
                max_seq: 16,
                ..ModelConfig::default()
            },
            train: TrainOptions {
                steps: 2000,
                lr: 0.5,
                batch_size: 8,
                clip_norm: Some(1.0),
                linear_decay: true,
                weight_decay: 0.006,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyRule {
    pub key: char,
    pub majority: char,
    pub minority: char,
    pub p_major: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Testbed {
    pub spec: TestbedSpec,
    pub rules: Vec<KeyRule>,
    pub corpus: Vec<Example>,
    /// minority-target prompts; the failures among them are repaired
    pub dataset: Vec<Example>,
    /// probes tagged with the 1-based dataset line they belong to
    pub related: Vec<Example>,
    pub unrelated: Vec<Example>,
}

fn pick(chars: &[char], rng: &mut ChaCha8Rng) -> char {
    chars[rng.random_range(0..chars.len())]
}

fn filler(spec: &TestbedSpec, rng: &mut ChaCha8Rng) -> String {
    let f: Vec<char> = FILLER.chars().collect();
    let n = rng.random_range(1..=spec.max_filler);
    (0..n).map(|_| pick(&f, rng)).collect()
}

pub fn generate(spec: &TestbedSpec) -> Testbed {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys: Vec<char> = KEYS.chars().take(spec.n_keys).collect();
    let values: Vec<char> = VALUES.chars().collect();
    let rules: Vec<KeyRule> = keys
        .iter()
        .map(|&key| {
            let majority = pick(&values, &mut rng);
            let mut minority = pick(&values, &mut rng);
            while minority == majority {
                minority = pick(&values, &mut rng);
            }
            KeyRule {
                key,
                majority,
                minority,
                p_major: rng.random_range(spec.p_major.0..=spec.p_major.1),
            }
        })
        .collect();

    let mut corpus = Vec::new();
    for r in &rules {
        let n = spec.train_examples_per_key;
        let n_major = (r.p_major * n as f64).round() as usize;
        for i in 0..n {
            let v = if i < n_major { r.majority } else { r.minority };
            corpus.push(Example::new(format!("{}{}", filler(spec, &mut rng), r.key), v));
        }
    }
    corpus.shuffle(&mut rng);

    let mut dataset = Vec::new();
    for _ in 0..spec.dataset_prompts_per_key {
        for r in &rules {
            dataset.push(Example::new(
                format!("{}{}", filler(spec, &mut rng), r.key),
                r.minority,
            ));
        }
    }

    let mut related = Vec::new();
    let mut unrelated = Vec::new();
    for (i, ex) in dataset.iter().enumerate() {
        let line = i + 1;
        let key = ex.prompt.chars().last().expect("non-empty prompt");
        for _ in 0..spec.related_per_failure {
            let mut p = Example::new(format!("{}{}", filler(spec, &mut rng), key), ex.target.clone());
            while p.prompt == ex.prompt {
                p.prompt = format!("{}{}", filler(spec, &mut rng), key);
            }
            p.for_line = Some(line);
            related.push(p);
        }
        for _ in 0..spec.unrelated_per_failure {
            let other = loop {
                let r = &rules[rng.random_range(0..rules.len())];
                if r.key != key {
                    break r;
                }
            };
            let mut p = Example::new(
                format!("{}{}", filler(spec, &mut rng), other.key),
                other.majority,
            );
            p.for_line = Some(line);
            unrelated.push(p);
        }
    }
    Testbed {
        spec: spec.clone(),
        rules,
        corpus,
        dataset,
        related,
        unrelated,
    }
}

impl Testbed {
    /// Completion-only items: the loss covers the value token alone.
    pub fn items(&self) -> Vec<TrainItem> {
        self.corpus
            .iter()
            .map(|e| TrainItem::completion(&e.prompt_tokens(), &e.target_tokens()))
            .collect()
    }

    pub fn train(&self) -> Result<(TinyLM, TrainReport)> {
        train_items(self.spec.config.clone(), &self.items(), &self.spec.train)
    }

    /// Checkpoint file for this spec under `dir`; the name hashes the spec.
    pub fn cache_path(&self, dir: &Path) -> PathBuf {
        let json = serde_json::to_vec(&self.spec).expect("spec serializes");
        // FNV-1a
        let h = json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        });
        dir.join(format!("testbed-{h:016x}.ckpt"))
    }

    /// Loads the trained model from `dir` or trains and stores it there.
    pub fn train_cached(&self, dir: &Path) -> Result<TinyLM> {
        let path = self.cache_path(dir);
        if let Ok(m) = load_checkpoint_with_config(&path, &self.spec.config) {
            return Ok(m);
        }
        let (m, _) = self.train()?;
        std::fs::create_dir_all(dir)?;
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        save_checkpoint(&m, &tmp)?;
        std::fs::rename(&tmp, &path)?;
        Ok(m)
    }

    /// Probes attached to dataset line `line`.
    pub fn probes_for(&self, line: usize) -> (Vec<&Example>, Vec<&Example>) {
        let f = |v: &'_ [Example]| -> Vec<usize> {
            v.iter()
                .enumerate()
                .filter(|(_, e)| e.for_line == Some(line))
                .map(|(i, _)| i)
                .collect()
        };
        (
            f(&self.related).into_iter().map(|i| &self.related[i]).collect(),
            f(&self.unrelated).into_iter().map(|i| &self.unrelated[i]).collect(),
        )
    }
}
