//! Source records to Alpaca-format training data.
//!
//! Each source case becomes exactly one single-hop record (bare question,
//! empty history) and one multi-hop record (question plus numbered
//! sub-question chain, intermediate QA pairs as history). Splits are decided
//! per case id, so both variants always partition identically.

use crate::model::{AlpacaRecord, SourceRecord, TrainConfigSpec};
use crate::Error;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

pub const DEFAULT_INSTRUCTION: &str = "Answer the question; reason step by step through the given \
sub-questions when provided, and output only the final answer.";
pub const DEFAULT_DIRECT_FRAMING: &str = "Question: {question}";
pub const DEFAULT_MULTI_HOP_FRAMING: &str =
    "Question: {question}\nDecomposition chain:\n{subquestions}";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("template slot {{{slot}}} is not bound")]
    UnboundSlot { slot: String },

    #[error("case {case_id}: need at least 2 hops for a multi-hop record, found {hops}")]
    DegenerateChain { case_id: String, hops: usize },

    #[error("duplicate case id {0:?}")]
    DuplicateCaseId(String),

    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),

    #[error("malformed dataset {path}: {message}")]
    Malformed { path: String, message: String },

    #[error(transparent)]
    Io(#[from] Error),
}

/// Prompt texts with `{slot}` placeholders.
///
/// Slots: `{question}` in both framings, `{subquestions}` and `{hop_count}`
/// in the multi-hop framing. `{hop_count}` is also available to the instruction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub instruction_text: String,
    pub multi_hop_framing: String,
    pub direct_framing: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            instruction_text: DEFAULT_INSTRUCTION.to_string(),
            multi_hop_framing: DEFAULT_MULTI_HOP_FRAMING.to_string(),
            direct_framing: DEFAULT_DIRECT_FRAMING.to_string(),
        }
    }
}

/// Substitutes `{name}` slots in one pass. Any `{identifier}` left unbound is an error;
/// braces that do not enclose an identifier are copied as-is.
pub fn render(template: &str, slots: &[(&str, &str)]) -> Result<String, DatasetError> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let close = after.find('}');
        let name = close.map(|c| &after[..c]);
        match name {
            Some(n) if is_slot_name(n) => {
                let value = slots
                    .iter()
                    .find(|(k, _)| *k == n)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| DatasetError::UnboundSlot { slot: n.to_string() })?;
                out.push_str(value);
                rest = &after[n.len() + 1..];
            }
            _ => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn is_slot_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn numbered(questions: impl Iterator<Item = impl AsRef<str>>) -> String {
    questions
        .enumerate()
        .map(|(i, q)| format!("{}. {}", i + 1, q.as_ref()))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Decomposed variant: the chain goes into the input, hops 1..n-1 into the history.
pub fn to_multi_hop(record: &SourceRecord, template: &PromptTemplate) -> Result<AlpacaRecord, DatasetError> {
    let n = record.hop_chain.len();
    if n < 2 {
        return Err(DatasetError::DegenerateChain {
            case_id: record.case_id.clone(),
            hops: n,
        });
    }
    let hop_count = n.to_string();
    let chain = numbered(record.hop_chain.iter().map(|h| &h.question));
    let slots = [
        ("question", record.primary_question()),
        ("subquestions", chain.as_str()),
        ("hop_count", hop_count.as_str()),
    ];
    Ok(AlpacaRecord {
        instruction: render(&template.instruction_text, &slots)?,
        input: render(&template.multi_hop_framing, &slots)?,
        output: record.final_answer.clone(),
        history: record.hop_chain[..n - 1]
            .iter()
            .map(|h| (h.question.clone(), h.answer.clone()))
            .collect(),
    })
}

/// Direct variant: the bare question, no chain, no history.
pub fn to_single_hop(record: &SourceRecord, template: &PromptTemplate) -> Result<AlpacaRecord, DatasetError> {
    let hop_count = record.hop_chain.len().to_string();
    let slots = [
        ("question", record.primary_question()),
        ("hop_count", hop_count.as_str()),
    ];
    Ok(AlpacaRecord {
        instruction: render(&template.instruction_text, &slots)?,
        input: render(&template.direct_framing, &slots)?,
        output: record.final_answer.clone(),
        history: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Partition::Train => "train",
            Partition::Test => "test",
        })
    }
}

/// Train/test assignment for a set of case ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitAssignment {
    /// In the order the records were given.
    pub order: Vec<String>,
    pub partition: BTreeMap<String, Partition>,
    pub ratio: f64,
    pub seed: u64,
}

impl SplitAssignment {
    pub fn get(&self, case_id: &str) -> Option<Partition> {
        self.partition.get(case_id).copied()
    }

    pub fn count(&self, p: Partition) -> usize {
        self.partition.values().filter(|&&x| x == p).count()
    }

    /// Case ids of one partition, in record order.
    pub fn ids(&self, p: Partition) -> Vec<&str> {
        self.order
            .iter()
            .filter(|id| self.partition[id.as_str()] == p)
            .map(String::as_str)
            .collect()
    }

    /// Manifest CSV: `case_id,partition,seed,ratio`, one row per case in record order.
    pub fn write_manifest(&self, path: &Path) -> Result<(), Error> {
        let write = || -> Result<(), csv::Error> {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(["case_id", "partition", "seed", "ratio"])?;
            let seed = self.seed.to_string();
            let ratio = self.ratio.to_string();
            for id in &self.order {
                w.write_record([id.as_str(), &self.partition[id].to_string(), &seed, &ratio])?;
            }
            w.flush()?;
            Ok(())
        };
        write().map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// Number of training cases for `n` records: `floor(ratio * n + 0.5)`.
pub fn train_size(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 0.5).floor() as usize
}

/// Uniform draw in `0..bound` by rejection, independent of any RNG crate's range sampling.
pub(crate) fn below(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let zone = u64::MAX - u64::MAX % bound;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

/// Seeded train/test split over case ids.
///
/// Ids are sorted, permuted by a Fisher-Yates shuffle driven by ChaCha8 seeded
/// from `seed`, and the first `train_size` go to train. The result depends only
/// on the id set, ratio and seed.
pub fn split(records: &[SourceRecord], ratio: f64, seed: u64) -> Result<SplitAssignment, DatasetError> {
    split_ids(records.iter().map(|r| r.case_id.clone()).collect(), ratio, seed)
}

pub fn split_ids(order: Vec<String>, ratio: f64, seed: u64) -> Result<SplitAssignment, DatasetError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DatasetError::BadRatio(ratio));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = order.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(DatasetError::DuplicateCaseId(dup.clone()));
    }
    let mut ids: Vec<&str> = order.iter().map(String::as_str).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..ids.len()).rev() {
        let j = below(&mut rng, i as u64 + 1) as usize;
        ids.swap(i, j);
    }
    let k = train_size(ratio, ids.len());
    let partition = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let p = if i < k { Partition::Train } else { Partition::Test };
            (id.to_string(), p)
        })
        .collect();
    Ok(SplitAssignment {
        order,
        partition,
        ratio,
        seed,
    })
}

/// Writes an Alpaca dataset: pretty JSON array, keys `instruction, input, output, history`, trailing newline.
pub fn emit_dataset(records: &[AlpacaRecord], path: &Path) -> Result<(), DatasetError> {
    let mut text = serde_json::to_string_pretty(records).expect("records always serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DatasetError::Io(Error::io(path, e)))
}

pub fn parse_dataset(path: &Path) -> Result<Vec<AlpacaRecord>, DatasetError> {
    let bytes = std::fs::read(path).map_err(|e| DatasetError::Io(Error::io(path, e)))?;
    serde_json::from_slice(&bytes).map_err(|e| DatasetError::Malformed {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// `1e-4` -> `1.0e-4`, so YAML 1.1 loaders read it as a float rather than a string.
fn yaml_float(v: f64) -> String {
    let s = format!("{v:e}");
    match s.split_once('e') {
        Some((mantissa, exp)) if !mantissa.contains('.') => format!("{mantissa}.0e{exp}"),
        _ => s,
    }
}

fn yaml_string(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// The YAML text written by [`emit_train_config`].
pub fn render_train_config(spec: &TrainConfigSpec) -> String {
    format!(
        "per_device_train_batch_size: {}\n\
         gradient_accumulation_steps: {}\n\
         learning_rate: {}\n\
         num_train_epochs: {}\n\
         dataset_path: {}\n\
         output_dir: {}\n",
        spec.per_device_train_batch_size,
        spec.gradient_accumulation_steps,
        yaml_float(spec.learning_rate),
        spec.num_train_epochs,
        yaml_string(&spec.dataset_path),
        yaml_string(&spec.output_dir),
    )
}

pub fn emit_train_config(spec: &TrainConfigSpec, path: &Path) -> Result<(), Error> {
    spec.validate()?;
    std::fs::write(path, render_train_config(spec)).map_err(|e| Error::io(path, e))
}
