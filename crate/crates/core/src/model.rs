//! Shared domain types.
//!
//! Every type here is a plain value: construct it, validate it, pass it
//! around. Entity labels are kept as raw text; any fuzzy comparison belongs
//! to [`crate::scoring::normalize`].

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::collections::HashSet;
use std::fmt;

/// Opaque key/value bag carried through parsing and emission untouched.
pub type Extras = Map<String, Value>;

/// A single `(subject, relation, object)` fact.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactTriple {
    pub subject: String,
    pub relation: String,
    pub object: String,
}

impl FactTriple {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            object: object.into(),
        }
    }
}

/// A rewrite of one fact: `(subject, relation)` moves from `old_object` to `new_object`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditSpec {
    pub subject: String,
    pub relation: String,
    pub old_object: String,
    pub new_object: String,
    /// Unmapped fields of the source rewrite entry.
    pub extras: Extras,
}

impl EditSpec {
    pub fn new(
        subject: impl Into<String>,
        relation: impl Into<String>,
        old_object: impl Into<String>,
        new_object: impl Into<String>,
    ) -> Self {
        Self {
            subject: subject.into(),
            relation: relation.into(),
            old_object: old_object.into(),
            new_object: new_object.into(),
            extras: Extras::new(),
        }
    }
}

/// One step of a decomposition chain.
#[derive(Debug, Clone, PartialEq)]
pub struct HopStep {
    /// 1-based position in the chain.
    pub index: usize,
    pub question: String,
    pub answer: String,
    pub answer_aliases: Vec<String>,
    pub triple: Option<FactTriple>,
    pub extras: Extras,
}

impl HopStep {
    pub fn new(index: usize, question: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            index,
            question: question.into(),
            answer: answer.into(),
            answer_aliases: Vec::new(),
            triple: None,
            extras: Extras::new(),
        }
    }

    pub fn with_triple(mut self, triple: FactTriple) -> Self {
        self.triple = Some(triple);
        self
    }

    pub fn with_aliases<I, S>(mut self, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.answer_aliases = aliases.into_iter().map(Into::into).collect();
        self
    }
}

/// One benchmark case as read from the source dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceRecord {
    pub case_id: String,
    pub question_variants: Vec<String>,
    pub final_answer: String,
    pub final_answer_aliases: Vec<String>,
    pub hop_chain: Vec<HopStep>,
    pub edits: Vec<EditSpec>,
    pub extras: Extras,
}

impl SourceRecord {
    /// The question used for dataset generation and direct answering.
    pub fn primary_question(&self) -> &str {
        self.question_variants
            .first()
            .map(String::as_str)
            .unwrap_or_default()
    }

    /// Hop triples, if every hop carries one.
    pub fn chain_triples(&self) -> Option<Vec<&FactTriple>> {
        self.hop_chain.iter().map(|h| h.triple.as_ref()).collect()
    }
}

/// What rule a [`Violation`] breaks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    EmptyField,
    NoQuestionVariants,
    ChainTooShort,
    NonContiguousHopIndices,
    FinalAnswerChainMismatch,
    ChainDisconnected,
    NoEdits,
    EditDoesNotChange,
    DuplicateCaseId,
}

impl Rule {
    pub fn name(self) -> &'static str {
        match self {
            Rule::EmptyField => "empty field",
            Rule::NoQuestionVariants => "no question variants",
            Rule::ChainTooShort => "hop chain shorter than 2",
            Rule::NonContiguousHopIndices => "non-contiguous hop indices",
            Rule::FinalAnswerChainMismatch => "final-answer/chain mismatch",
            Rule::ChainDisconnected => "chain connectivity",
            Rule::NoEdits => "no edits",
            Rule::EditDoesNotChange => "edit does not change the fact",
            Rule::DuplicateCaseId => "duplicate case_id",
        }
    }
}

/// A single broken invariant, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl Violation {
    pub fn new(field: impl Into<String>, rule: Rule, detail: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            rule,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} ({})", self.field, self.rule.name(), self.detail)
    }
}

fn blank(s: &str) -> bool {
    s.trim().is_empty()
}

fn check_triple(out: &mut Vec<Violation>, field: &str, t: &FactTriple) {
    for (name, value) in [
        ("subject", &t.subject),
        ("relation", &t.relation),
        ("object", &t.object),
    ] {
        if blank(value) {
            out.push(Violation::new(
                format!("{field}.{name}"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
    }
}

/// Checks every record-level invariant and reports each breach.
///
/// Never fails; an empty list means the record is well-formed.
pub fn validate(record: &SourceRecord) -> Vec<Violation> {
    let mut out = Vec::new();

    if blank(&record.case_id) {
        out.push(Violation::new("case_id", Rule::EmptyField, "must be non-empty"));
    }
    if record.question_variants.is_empty() {
        out.push(Violation::new(
            "question_variants",
            Rule::NoQuestionVariants,
            "at least one question is required",
        ));
    }
    for (i, q) in record.question_variants.iter().enumerate() {
        if blank(q) {
            out.push(Violation::new(
                format!("question_variants[{i}]"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
    }
    if blank(&record.final_answer) {
        out.push(Violation::new("final_answer", Rule::EmptyField, "must be non-empty"));
    }

    if record.hop_chain.len() < 2 {
        out.push(Violation::new(
            "hop_chain",
            Rule::ChainTooShort,
            format!("found {} hop(s)", record.hop_chain.len()),
        ));
    }
    let indices: Vec<usize> = record.hop_chain.iter().map(|h| h.index).collect();
    if indices.iter().enumerate().any(|(pos, &idx)| idx != pos + 1) {
        out.push(Violation::new(
            "hop_chain.index",
            Rule::NonContiguousHopIndices,
            format!("found {indices:?}"),
        ));
    }
    for (pos, hop) in record.hop_chain.iter().enumerate() {
        if blank(&hop.question) {
            out.push(Violation::new(
                format!("hop_chain[{pos}].question"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
        if blank(&hop.answer) {
            out.push(Violation::new(
                format!("hop_chain[{pos}].answer"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
        if let Some(t) = &hop.triple {
            check_triple(&mut out, &format!("hop_chain[{pos}].triple"), t);
        }
    }

    if let Some(last) = record.hop_chain.last() {
        let matches = last.answer == record.final_answer
            || last.answer_aliases.contains(&record.final_answer);
        if !matches {
            out.push(Violation::new(
                "final_answer",
                Rule::FinalAnswerChainMismatch,
                format!(
                    "final hop answers {:?}, record answers {:?}",
                    last.answer, record.final_answer
                ),
            ));
        }
    }

    if let Some(triples) = record.chain_triples() {
        for (k, pair) in triples.windows(2).enumerate() {
            if pair[0].object != pair[1].subject {
                out.push(Violation::new(
                    format!("hop_chain[{}].triple.subject", k + 1),
                    Rule::ChainDisconnected,
                    format!(
                        "hop {} ends at {:?} but hop {} starts at {:?}",
                        k + 1,
                        pair[0].object,
                        k + 2,
                        pair[1].subject
                    ),
                ));
            }
        }
    }

    if record.edits.is_empty() {
        out.push(Violation::new("edits", Rule::NoEdits, "at least one edit is required"));
    }
    for (i, e) in record.edits.iter().enumerate() {
        if blank(&e.subject) {
            out.push(Violation::new(
                format!("edits[{i}].subject"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
        if blank(&e.relation) {
            out.push(Violation::new(
                format!("edits[{i}].relation"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
        if blank(&e.new_object) {
            out.push(Violation::new(
                format!("edits[{i}].new_object"),
                Rule::EmptyField,
                "must be non-empty",
            ));
        }
        if e.new_object == e.old_object {
            out.push(Violation::new(
                format!("edits[{i}].new_object"),
                Rule::EditDoesNotChange,
                format!("old and new object are both {:?}", e.new_object),
            ));
        }
    }

    out
}

/// Dataset-level check: case ids must be unique. Reports every repeat after the first.
pub fn validate_unique_ids<'a, I>(records: I) -> Vec<Violation>
where
    I: IntoIterator<Item = &'a SourceRecord>,
{
    let mut seen = HashSet::new();
    records
        .into_iter()
        .filter(|r| !seen.insert(r.case_id.as_str()))
        .map(|r| {
            Violation::new(
                "case_id",
                Rule::DuplicateCaseId,
                format!("{:?} already used", r.case_id),
            )
        })
        .collect()
}

/// One instruction-tuning instance in Alpaca layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlpacaRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
    pub history: Vec<(String, String)>,
}

/// Which inference protocol produced an outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    Direct,
    DecomposedScripted,
    DecomposedModel,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Direct => "direct",
            EvalMode::DecomposedScripted => "decomposed-scripted",
            EvalMode::DecomposedModel => "decomposed-model",
        }
    }

    pub fn is_decomposed(self) -> bool {
        !matches!(self, EvalMode::Direct)
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(EvalMode::Direct),
            "decomposed-scripted" => Ok(EvalMode::DecomposedScripted),
            "decomposed-model" => Ok(EvalMode::DecomposedModel),
            other => Err(format!(
                "unknown mode {other:?} (expected direct, decomposed-scripted or decomposed-model)"
            )),
        }
    }
}

/// The gold side of one evaluation item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gold {
    pub case_id: String,
    pub answer: String,
    pub aliases: Vec<String>,
}

impl From<&SourceRecord> for Gold {
    fn from(r: &SourceRecord) -> Self {
        Gold {
            case_id: r.case_id.clone(),
            answer: r.final_answer.clone(),
            aliases: r.final_answer_aliases.clone(),
        }
    }
}

/// One model exchange: a short description of what was asked, and what came back.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub prompt: String,
    pub completion: String,
}

/// Per-item prediction record.
///
/// The verdict is computed at construction from `(prediction, gold, aliases)`
/// and cannot be set independently.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub case_id: String,
    pub mode: EvalMode,
    pub prediction: String,
    pub gold: String,
    pub gold_aliases: Vec<String>,
    verdict: bool,
    pub transcript: Vec<Exchange>,
    /// Number of decomposition steps taken (hops for scripted runs, loop iterations for model-driven ones).
    pub hop_count: usize,
    pub truncated: bool,
    pub diagnostic: Option<String>,
}

impl EvalOutcome {
    pub fn new(gold: &Gold, mode: EvalMode, prediction: impl Into<String>) -> Self {
        let prediction = prediction.into();
        let verdict = crate::scoring::is_correct(&prediction, &gold.answer, &gold.aliases);
        Self {
            case_id: gold.case_id.clone(),
            mode,
            prediction,
            gold: gold.answer.clone(),
            gold_aliases: gold.aliases.clone(),
            verdict,
            transcript: Vec::new(),
            hop_count: 0,
            truncated: false,
            diagnostic: None,
        }
    }

    /// An outcome that is wrong regardless of its prediction text, e.g. a protocol violation.
    pub fn failed(gold: &Gold, mode: EvalMode, diagnostic: impl Into<String>) -> Self {
        let mut out = Self::new(gold, mode, "");
        out.verdict = false;
        out.diagnostic = Some(diagnostic.into());
        out
    }

    pub fn verdict(&self) -> bool {
        self.verdict
    }
}

/// Settings for a run against an inference backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Base URL of a chat-completions server, or [`RunConfig::MOCK_ENDPOINT`].
    pub endpoint: String,
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub max_hops: usize,
    pub parallelism: usize,
    pub timeout_seconds: f64,
    pub max_retries: u32,
    pub seed: u64,
}

impl RunConfig {
    pub const MOCK_ENDPOINT: &'static str = "mock";

    pub fn mock() -> Self {
        Self::default()
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == Self::MOCK_ENDPOINT
    }

    pub fn validate(&self) -> Result<(), crate::Error> {
        let bad = |msg: &str| Err(crate::Error::InvalidConfig(msg.to_string()));
        if self.max_hops < 1 {
            return bad("max_hops must be at least 1");
        }
        if self.parallelism < 1 {
            return bad("parallelism must be at least 1");
        }
        if self.max_tokens < 1 {
            return bad("max_tokens must be positive");
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return bad("temperature must be a non-negative number");
        }
        if !(self.timeout_seconds.is_finite() && self.timeout_seconds > 0.0) {
            return bad("timeout_seconds must be positive");
        }
        if self.endpoint.trim().is_empty() {
            return bad("endpoint must be set");
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            endpoint: Self::MOCK_ENDPOINT.to_string(),
            model_name: "llama3".to_string(),
            temperature: 0.0,
            max_tokens: 256,
            max_hops: 4,
            parallelism: 1,
            timeout_seconds: 60.0,
            max_retries: 3,
            seed: 42,
        }
    }
}

/// LoRA fine-tuning hyperparameters written out for an external trainer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfigSpec {
    pub per_device_train_batch_size: u32,
    pub gradient_accumulation_steps: u32,
    pub learning_rate: f64,
    pub num_train_epochs: u32,
    pub dataset_path: String,
    pub output_dir: String,
}

impl Default for TrainConfigSpec {
    fn default() -> Self {
        Self {
            per_device_train_batch_size: 1,
            gradient_accumulation_steps: 8,
            learning_rate: 1.0e-4,
            num_train_epochs: 2,
            dataset_path: "multi_hop_train.json".to_string(),
            output_dir: "saves/llama3-lora".to_string(),
        }
    }
}

impl TrainConfigSpec {
    pub fn with_epochs(epochs: u32) -> Self {
        Self {
            num_train_epochs: epochs,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), crate::Error> {
        let bad = |msg: &str| Err(crate::Error::InvalidConfig(msg.to_string()));
        if self.per_device_train_batch_size == 0 {
            return bad("per_device_train_batch_size must be positive");
        }
        if self.gradient_accumulation_steps == 0 {
            return bad("gradient_accumulation_steps must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.num_train_epochs == 0 {
            return bad("num_train_epochs must be positive");
        }
        Ok(())
    }
}
