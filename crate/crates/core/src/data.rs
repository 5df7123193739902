//! JSONL corpora and datasets: one `{"prompt": ..., "target": ...}` object
//! per line. Probe files may carry an extra `"for"` field naming the
//! dataset line whose repair the probe measures.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::evaluate::Probe;
use crate::model::tokenizer::{encode, encode_prompt, BOS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: String,
    pub target: String,
    #[serde(rename = "for", default, skip_serializing_if = "Option::is_none")]
    pub for_line: Option<usize>,
}

impl Example {
    pub fn new(prompt: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            target: target.into(),
            for_line: None,
        }
    }

    pub fn prompt_tokens(&self) -> Vec<usize> {
        encode_prompt(&self.prompt)
    }

    pub fn target_tokens(&self) -> Vec<usize> {
        encode(&self.target)
    }

    /// `BOS · prompt · target`, the training sequence for this example.
    pub fn sequence(&self) -> Vec<usize> {
        let mut s = vec![BOS];
        s.extend(encode(&self.prompt));
        s.extend(encode(&self.target));
        s
    }

    /// The example as a next-token probe on the first target byte.
    pub fn probe(&self, id: impl Into<String>) -> Result<Probe> {
        let target = *self
            .target_tokens()
            .first()
            .ok_or_else(|| invalid("probe target is empty"))?;
        Ok(Probe {
            id: id.into(),
            tokens: self.prompt_tokens(),
            target,
        })
    }
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(line).map_err(|e| Error::Dataset {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_jsonl(&text, path)
}

/// Writes one JSON object per line.
pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}
