//! Dataset adapter: line-delimited JSON conversations plus a label manifest.
//!
//! Each line is `{"id", "emotion", "situation", "utterances": [{"speaker", "text"}]}`
//! with speakers `user`/`sys` alternating from `user`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use empathic_core::corpus::{
    self, Conversation, EmotionInventory, SampleMode, SplitSet, TestSample,
};
use serde::{Deserialize, Serialize};

use crate::error::{Error, RecordDiagnostic, Result};
use crate::io;

/// Format id of the record schema above.
pub const ED_JSONL_V1: &str = "ed-jsonl-v1";

pub fn load_inventory(path: &Path) -> Result<EmotionInventory> {
    Ok(EmotionInventory::from_manifest(&io::read_string(path)?)?)
}

/// Valid conversations plus one diagnostic per rejected record.
#[derive(Debug, Clone, Default)]
pub struct DatasetLoad {
    pub conversations: Vec<Conversation>,
    pub diagnostics: Vec<RecordDiagnostic>,
}

fn check_schema(schema: &str) -> Result<()> {
    if schema != ED_JSONL_V1 {
        return Err(Error::Config(format!("unsupported dataset schema {schema:?}")));
    }
    Ok(())
}

/// Parses and validates every record, collecting diagnostics instead of
/// stopping at the first bad one.
pub fn load_dataset_lenient(
    path: &Path,
    schema: &str,
    inventory: &EmotionInventory,
) -> Result<DatasetLoad> {
    check_schema(schema)?;
    let lines = io::read_lines(path)?;
    if lines.is_empty() {
        log::warn!("dataset {} is empty", path.display());
    }
    let mut out = DatasetLoad::default();
    let mut seen = HashSet::new();
    for (line, text) in lines {
        let mut conv: Conversation = match serde_json::from_str(&text) {
            Ok(c) => c,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&text)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(str::to_string));
                out.diagnostics.push(RecordDiagnostic {
                    line,
                    conversation_id: id,
                    reason: format!("malformed record: {e}"),
                });
                continue;
            }
        };
        if let Err(e) = conv.validate(inventory) {
            out.diagnostics.push(RecordDiagnostic {
                line,
                conversation_id: Some(conv.id.clone()),
                reason: e.to_string(),
            });
            continue;
        }
        if !seen.insert(conv.id.clone()) {
            out.diagnostics.push(RecordDiagnostic {
                line,
                conversation_id: Some(conv.id.clone()),
                reason: "duplicate conversation id".into(),
            });
            continue;
        }
        out.conversations.push(conv);
    }
    Ok(out)
}

/// Loads a dataset, failing with every diagnostic if any record is invalid.
pub fn load_dataset(
    path: &Path,
    schema: &str,
    inventory: &EmotionInventory,
) -> Result<Vec<Conversation>> {
    let load = load_dataset_lenient(path, schema, inventory)?;
    if !load.diagnostics.is_empty() {
        return Err(Error::Dataset {
            path: path.to_path_buf(),
            diagnostics: load.diagnostics,
        });
    }
    Ok(load.conversations)
}

pub fn serialize(conversations: &[Conversation]) -> String {
    io::to_jsonl(conversations)
}

pub fn write_dataset(path: &Path, conversations: &[Conversation]) -> Result<()> {
    io::write_jsonl(path, conversations)
}

pub fn load_samples(path: &Path) -> Result<Vec<TestSample>> {
    io::read_jsonl(path)
}

/// Summary written next to the split files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema: String,
    pub input_digest: String,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub sizes: [usize; 3],
    pub sample_seed: u64,
    pub sample_count: Option<usize>,
    pub single_turn_samples: usize,
    pub multi_turn_samples: usize,
}

#[derive(Debug, Clone)]
pub struct PrepareOptions {
    pub ratios: [f64; 3],
    pub seed: u64,
    /// Subsample each test mode to this many samples.
    pub sample_count: Option<usize>,
}

/// File names inside a prepared data directory.
pub struct PreparedPaths {
    pub root: PathBuf,
}

impl PreparedPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("{name}.jsonl"))
    }
    pub fn samples(&self, mode: SampleMode) -> PathBuf {
        self.root.join(format!("samples_{}.jsonl", mode.as_str()))
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("split.json")
    }
}

/// Loads, splits, and cuts test samples, writing everything under `out`.
pub fn prepare_data(
    input: &Path,
    inventory: &EmotionInventory,
    opts: &PrepareOptions,
    out: &Path,
) -> Result<(SplitSet, SplitManifest)> {
    let conversations = load_dataset(input, ED_JSONL_V1, inventory)?;
    let set = corpus::split(&conversations, opts.ratios, opts.seed)?;
    let paths = PreparedPaths::new(out);
    write_dataset(&paths.split("train"), &set.train)?;
    write_dataset(&paths.split("valid"), &set.valid)?;
    write_dataset(&paths.split("test"), &set.test)?;
    let mut counts = [0; 2];
    for (i, mode) in [SampleMode::SingleTurn, SampleMode::MultiTurn].into_iter().enumerate() {
        let mut samples = corpus::make_test_samples(&set.test, mode);
        if let Some(n) = opts.sample_count {
            samples = corpus::subsample(&samples, n, opts.seed);
        }
        counts[i] = samples.len();
        io::write_jsonl(&paths.samples(mode), &samples)?;
    }
    let manifest = SplitManifest {
        schema: ED_JSONL_V1.into(),
        input_digest: io::file_digest(input)?,
        seed: opts.seed,
        ratios: opts.ratios,
        sizes: [set.train.len(), set.valid.len(), set.test.len()],
        sample_seed: opts.seed,
        sample_count: opts.sample_count,
        single_turn_samples: counts[0],
        multi_turn_samples: counts[1],
    };
    io::write_json(&paths.manifest(), &manifest)?;
    Ok((set, manifest))
}
