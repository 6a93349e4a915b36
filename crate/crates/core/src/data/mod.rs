//! Datasets: JSON-lines ingestion, validation and the forget-set transforms.

mod augment;
mod batching;

pub use augment::{augment_resegment, split_sentences};
pub use batching::{make_batches, Batch};

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_NEGATIVE_RESPONSE: &str = "I don't know.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Forget,
    Retain,
    Holdout,
    EvalGeneral,
}

impl Split {
    pub const ALL: [Split; 4] = [
        Split::Forget,
        Split::Retain,
        Split::Holdout,
        Split::EvalGeneral,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Forget => "forget",
            Split::Retain => "retain",
            Split::Holdout => "holdout",
            Split::EvalGeneral => "eval_general",
        }
    }

    fn requires_output(self) -> bool {
        !matches!(self, Split::EvalGeneral)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Qa,
    Completion,
}

/// One dataset item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub id: String,
    pub input: String,
    #[serde(default)]
    pub output: String,
    pub split: Split,
    pub task: Task,
}

impl Example {
    pub fn new(
        id: impl Into<String>,
        input: impl Into<String>,
        output: impl Into<String>,
        split: Split,
        task: Task,
    ) -> Self {
        Example {
            id: id.into(),
            input: input.into(),
            output: output.into(),
            split,
            task,
        }
    }
}

/// Where a dataset came from: file path (if any) and SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: Option<String>,
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub provenance: Provenance,
}

impl Dataset {
    /// Validates `examples` and computes the digest of their JSON-lines form.
    pub fn from_examples(examples: Vec<Example>) -> Result<Self> {
        validate(&examples, |i| i + 1)?;
        let digest = hex::encode(Sha256::digest(to_jsonl(&examples)?));
        Ok(Dataset {
            examples,
            provenance: Provenance {
                source: None,
                digest,
            },
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&to_jsonl(&self.examples)?)?;
        Ok(())
    }
}

fn to_jsonl(examples: &[Example]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn validate(examples: &[Example], line_of: impl Fn(usize) -> usize) -> Result<()> {
    let mut seen = HashSet::new();
    for (i, e) in examples.iter().enumerate() {
        if !seen.insert(e.id.as_str()) {
            return Err(Error::Validation(format!(
                "line {}: duplicate id {:?}",
                line_of(i),
                e.id
            )));
        }
        if e.split.requires_output() && e.output.is_empty() {
            return Err(Error::Validation(format!(
                "line {}: example {:?} in split {} has no output",
                line_of(i),
                e.id,
                e.split
            )));
        }
    }
    Ok(())
}

/// Reads a JSON-lines dataset. Blank lines are skipped; errors name the
/// 1-based line they occurred on.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Parse {
        line: bytes[..e.valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count()
            + 1,
        msg: "invalid UTF-8".into(),
    })?;
    let mut examples = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let ex: Example = serde_json::from_value(value).map_err(|e| {
            let msg = e.to_string();
            // Bad enum values and stray keys are schema violations, not syntax errors.
            if msg.contains("unknown variant") || msg.contains("unknown field") {
                Error::Validation(format!("line {}: {msg}", i + 1))
            } else {
                Error::Parse { line: i + 1, msg }
            }
        })?;
        examples.push(ex);
        lines.push(i + 1);
    }
    validate(&examples, |i| lines[i])?;
    Ok(Dataset {
        examples,
        provenance: Provenance {
            source: Some(path.display().to_string()),
            digest: hex::encode(Sha256::digest(&bytes)),
        },
    })
}

/// Replaces every forget-split output with `phrase`; other splits are untouched.
pub fn apply_negative_response(ds: &Dataset, phrase: &str) -> Result<Dataset> {
    if phrase.is_empty() {
        return Err(Error::Validation(
            "negative response phrase must be nonempty".into(),
        ));
    }
    let examples = ds
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            if e.split == Split::Forget {
                e.output = phrase.to_string();
            }
            e
        })
        .collect();
    Dataset::from_examples(examples)
}
