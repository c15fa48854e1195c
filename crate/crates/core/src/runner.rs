//! Inference protocols.
//!
//! - direct: one prompt with instruction and question, one answer
//! - decomposed-scripted: the gold sub-questions are asked one by one, each
//!   prior answer substituted into the next question
//! - decomposed-model: the model writes its own `Subquestion:` lines, each is
//!   answered by a separate call, until it writes `Final answer:`

use crate::backend::{Backend, BackendError, ChatMessage};
use crate::datasetgen::{self, PromptTemplate};
use crate::model::{AlpacaRecord, EvalMode, EvalOutcome, Exchange, Gold, RunConfig, SourceRecord};
use crate::Error;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

pub const SUBQUESTION_MARKER: &str = "Subquestion:";
pub const INTERMEDIATE_MARKER: &str = "Intermediate answer:";
pub const FINAL_MARKER: &str = "Final answer:";
const ANSWER_MARKER: &str = "Answer:";
const QUESTION_MARKER: &str = "Question:";

const SUBQUESTION_SYSTEM: &str = "Answer the question with the name of the entity only.";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("case {case_id}: {source}")]
    Backend {
        case_id: String,
        #[source]
        source: BackendError,
    },

    #[error("case {case_id}: {message}")]
    Precondition { case_id: String, message: String },

    #[error(transparent)]
    Dataset(#[from] datasetgen::DatasetError),

    #[error(transparent)]
    Config(#[from] Error),
}

impl RunError {
    fn backend(case_id: &str, source: BackendError) -> Self {
        RunError::Backend {
            case_id: case_id.to_string(),
            source,
        }
    }

    pub fn is_backend(&self) -> bool {
        matches!(self, RunError::Backend { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("empty completion")]
pub struct EmptyCompletion;

fn marker_text<'a>(line: &'a str, marker: &str) -> Option<&'a str> {
    line.trim_start().strip_prefix(marker)
}

/// Pulls the answer out of a completion.
///
/// Text after the last line-initial `Final answer:`, else after the last
/// line-initial `Answer:`, else the last non-empty line. Always trimmed.
pub fn extract_answer(completion: &str) -> Result<String, EmptyCompletion> {
    if completion.trim().is_empty() {
        return Err(EmptyCompletion);
    }
    let lines: Vec<&str> = completion.lines().collect();
    let last_marked = |marker: &str| lines.iter().rev().find_map(|l| marker_text(l, marker));
    let text = last_marked(FINAL_MARKER)
        .or_else(|| last_marked(ANSWER_MARKER))
        .or_else(|| lines.iter().rev().copied().find(|l| !l.trim().is_empty()))
        .unwrap_or_default();
    Ok(text.trim().to_string())
}

/// The sub-question/intermediate/final answer exchange format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecompositionProtocol {
    pub max_hops: usize,
}

impl Default for DecompositionProtocol {
    fn default() -> Self {
        Self { max_hops: 4 }
    }
}

/// What the model said in one loop iteration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Subquestion(String),
    Final(String),
    Violation,
}

impl DecompositionProtocol {
    pub fn new(max_hops: usize) -> Self {
        Self { max_hops }
    }

    pub fn markers() -> [&'static str; 3] {
        [SUBQUESTION_MARKER, INTERMEDIATE_MARKER, FINAL_MARKER]
    }

    pub fn instructions(&self) -> String {
        format!(
            "Answer the question by breaking it into simple sub-questions, one at a time.\n\
             Reply with exactly one line: either the next sub-question, starting with \"{SUBQUESTION_MARKER}\", \
             or, once you know the answer, the answer starting with \"{FINAL_MARKER}\".\n\
             After each sub-question you will be given a line starting with \"{INTERMEDIATE_MARKER}\".\n\
             Use at most {} sub-questions.\n\n\
             Example:\n\
             {QUESTION_MARKER} What is the capital city of the country where the Eiffel Tower is located?\n\
             {SUBQUESTION_MARKER} In which country is the Eiffel Tower located?\n\
             {INTERMEDIATE_MARKER} France\n\
             {SUBQUESTION_MARKER} What is the capital city of France?\n\
             {INTERMEDIATE_MARKER} Paris\n\
             {FINAL_MARKER} Paris",
            self.max_hops
        )
    }

    /// The user turn: the question followed by the transcript so far.
    pub fn render_transcript(question: &str, steps: &[(String, String)]) -> String {
        let mut out = format!("{QUESTION_MARKER} {question}");
        for (q, a) in steps {
            out.push_str(&format!("\n{SUBQUESTION_MARKER} {q}\n{INTERMEDIATE_MARKER} {a}"));
        }
        out
    }

    /// Inverse of [`Self::render_transcript`]: the question of the last `Question:`
    /// line and the intermediate answers after it.
    pub fn parse_transcript(message: &str) -> Option<(&str, Vec<&str>)> {
        let lines: Vec<&str> = message.lines().collect();
        let start = lines
            .iter()
            .rposition(|l| marker_text(l, QUESTION_MARKER).is_some())?;
        let question = marker_text(lines[start], QUESTION_MARKER)?.trim();
        let answers = lines[start + 1..]
            .iter()
            .filter_map(|l| marker_text(l, INTERMEDIATE_MARKER))
            .map(str::trim)
            .collect();
        Some((question, answers))
    }

    pub fn question_of<'a>(&self, message: &'a str) -> Option<&'a str> {
        Self::parse_transcript(message).map(|(q, _)| q)
    }

    /// The first line carrying `Subquestion:` or `Final answer:` decides; anything after it is ignored.
    pub fn parse_step(completion: &str) -> Step {
        for line in completion.lines() {
            if let Some(a) = marker_text(line, FINAL_MARKER) {
                return Step::Final(a.trim().to_string());
            }
            if let Some(q) = marker_text(line, SUBQUESTION_MARKER) {
                return Step::Subquestion(q.trim().to_string());
            }
        }
        Step::Violation
    }
}

/// Options that are not part of [`RunConfig`].
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Scripted mode: send earlier hops as prior user/assistant turns instead of isolated prompts.
    pub carry_history: bool,
}

fn answer_of(completion: &str) -> (String, Option<String>) {
    match extract_answer(completion) {
        Ok(a) => (a, None),
        Err(e) => (String::new(), Some(e.to_string())),
    }
}

/// Direct answering of a single-hop record.
pub fn run_direct(
    record: &AlpacaRecord,
    gold: &Gold,
    backend: &dyn Backend,
    config: &RunConfig,
) -> Result<EvalOutcome, RunError> {
    if !record.history.is_empty() {
        return Err(RunError::Precondition {
            case_id: gold.case_id.clone(),
            message: "direct answering needs a record without history".into(),
        });
    }
    let prompt = if record.instruction.is_empty() {
        record.input.clone()
    } else {
        format!("{}\n\n{}", record.instruction, record.input)
    };
    let completion = backend
        .complete(&[ChatMessage::user(prompt.clone())], config)
        .map_err(|e| RunError::backend(&gold.case_id, e))?;
    let (prediction, diagnostic) = answer_of(&completion);
    let mut out = EvalOutcome::new(gold, EvalMode::Direct, prediction);
    out.transcript.push(Exchange {
        prompt,
        completion,
    });
    out.diagnostic = diagnostic;
    Ok(out)
}

/// Asks the gold hop questions in order, threading each answer into the next question.
pub fn run_decomposed_scripted(
    record: &SourceRecord,
    backend: &dyn Backend,
    config: &RunConfig,
    options: &RunOptions,
) -> Result<EvalOutcome, RunError> {
    let n = record.hop_chain.len();
    if n < 2 || n > config.max_hops {
        return Err(RunError::Precondition {
            case_id: record.case_id.clone(),
            message: format!("chain of {n} hops is outside 2..={}", config.max_hops),
        });
    }
    let gold = Gold::from(record);
    let mut transcript = Vec::with_capacity(n);
    let mut turns: Vec<ChatMessage> = Vec::new();
    let mut prev: Option<(&str, String)> = None;
    let mut notes = Vec::new();
    for hop in &record.hop_chain {
        let mut question = hop.question.clone();
        if let Some((gold_prev, got_prev)) = &prev {
            if gold_prev != got_prev {
                if question.contains(gold_prev) {
                    question = question.replace(gold_prev, got_prev);
                } else {
                    tracing::debug!(
                        case_id = %record.case_id,
                        hop = hop.index,
                        "substitution miss: {gold_prev:?} not found in {question:?}"
                    );
                    notes.push(format!("hop {}: substitution miss", hop.index));
                }
            }
        }
        let mut messages = if options.carry_history {
            turns.clone()
        } else {
            Vec::new()
        };
        messages.push(ChatMessage::user(question.clone()));
        let completion = backend
            .complete(&messages, config)
            .map_err(|e| RunError::backend(&record.case_id, e))?;
        let (answer, empty) = answer_of(&completion);
        if let Some(e) = empty {
            notes.push(format!("hop {}: {e}", hop.index));
        }
        if options.carry_history {
            turns.push(ChatMessage::user(question.clone()));
            turns.push(ChatMessage::assistant(answer.clone()));
        }
        transcript.push(Exchange {
            prompt: question,
            completion,
        });
        prev = Some((hop.answer.as_str(), answer));
    }
    let prediction = prev.map(|(_, a)| a).unwrap_or_default();
    let mut out = EvalOutcome::new(&gold, EvalMode::DecomposedScripted, prediction);
    out.transcript = transcript;
    out.hop_count = n;
    out.diagnostic = (!notes.is_empty()).then(|| notes.join("; "));
    Ok(out)
}

/// Model-driven decomposition loop.
///
/// Each iteration sends the protocol instructions and the running transcript.
/// A `Subquestion:` reply is answered by a second, separate call and appended
/// as `Intermediate answer:`. Stops on `Final answer:` or after
/// `protocol.max_hops` iterations; a capped run is scored on its last
/// intermediate answer and flagged truncated.
pub fn run_decomposed_model(
    question: &str,
    gold: &Gold,
    backend: &dyn Backend,
    protocol: &DecompositionProtocol,
    config: &RunConfig,
) -> Result<EvalOutcome, RunError> {
    if question.trim().is_empty() {
        return Err(RunError::Precondition {
            case_id: gold.case_id.clone(),
            message: "empty question".into(),
        });
    }
    let system = ChatMessage::system(protocol.instructions());
    let mut steps: Vec<(String, String)> = Vec::new();
    let mut transcript = Vec::new();
    let call = |messages: &[ChatMessage]| {
        backend
            .complete(messages, config)
            .map_err(|e| RunError::backend(&gold.case_id, e))
    };

    for iteration in 1..=protocol.max_hops {
        let user = DecompositionProtocol::render_transcript(question, &steps);
        let completion = call(&[system.clone(), ChatMessage::user(user.clone())])?;
        let step = DecompositionProtocol::parse_step(&completion);
        transcript.push(Exchange {
            prompt: user,
            completion: completion.clone(),
        });
        match step {
            Step::Final(answer) => {
                let mut out = EvalOutcome::new(gold, EvalMode::DecomposedModel, answer);
                out.transcript = transcript;
                out.hop_count = iteration;
                return Ok(out);
            }
            Step::Violation => {
                let mut out = EvalOutcome::failed(
                    gold,
                    EvalMode::DecomposedModel,
                    format!("protocol violation at iteration {iteration}: no marker in completion"),
                );
                out.transcript = transcript;
                out.hop_count = iteration;
                return Ok(out);
            }
            Step::Subquestion(sub) => {
                let reply = call(&[
                    ChatMessage::system(SUBQUESTION_SYSTEM),
                    ChatMessage::user(sub.clone()),
                ])?;
                let (answer, _) = answer_of(&reply);
                transcript.push(Exchange {
                    prompt: sub.clone(),
                    completion: reply,
                });
                steps.push((sub, answer));
            }
        }
    }

    let last = steps.last().map(|(_, a)| a.clone()).unwrap_or_default();
    let mut out = EvalOutcome::new(gold, EvalMode::DecomposedModel, last);
    out.transcript = transcript;
    out.hop_count = protocol.max_hops;
    out.truncated = true;
    out.diagnostic = Some(format!("no final answer within {} iterations", protocol.max_hops));
    Ok(out)
}

/// Runs `f` over `items` on at most `parallelism` threads and returns results in input order.
pub fn run_ordered<T, R, F>(items: &[T], parallelism: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    if parallelism <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(f).collect())
}

/// Evaluates every case under one mode. Outcomes come back in case order.
pub fn evaluate(
    mode: EvalMode,
    cases: &[SourceRecord],
    backend: &dyn Backend,
    config: &RunConfig,
    template: &PromptTemplate,
    options: &RunOptions,
) -> Result<Vec<EvalOutcome>, RunError> {
    config.validate()?;
    let protocol = DecompositionProtocol::new(config.max_hops);
    let one = |case: &SourceRecord| -> Result<EvalOutcome, RunError> {
        match mode {
            EvalMode::Direct => {
                let record = datasetgen::to_single_hop(case, template)?;
                run_direct(&record, &Gold::from(case), backend, config)
            }
            EvalMode::DecomposedScripted => run_decomposed_scripted(case, backend, config, options),
            EvalMode::DecomposedModel => run_decomposed_model(
                case.primary_question(),
                &Gold::from(case),
                backend,
                &protocol,
                config,
            ),
        }
    };
    run_ordered(cases, config.parallelism, one).into_iter().collect()
}

/// First line of an outcome log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogHeader {
    pub kind: String,
    pub mode: EvalMode,
    pub backend: String,
    /// False for live-model runs, whose completions may vary between runs.
    pub deterministic: bool,
    pub model: String,
    pub seed: u64,
}

impl LogHeader {
    pub fn new(mode: EvalMode, backend: &dyn Backend, config: &RunConfig) -> Self {
        Self {
            kind: "header".into(),
            mode,
            backend: backend.describe(),
            deterministic: backend.is_deterministic(),
            model: config.model_name.clone(),
            seed: config.seed,
        }
    }
}

/// One outcome line of an outcome log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedOutcome {
    pub case_id: String,
    pub mode: EvalMode,
    pub prediction: String,
    pub verdict: bool,
    pub hop_count: usize,
    pub truncated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl From<&EvalOutcome> for LoggedOutcome {
    fn from(o: &EvalOutcome) -> Self {
        Self {
            case_id: o.case_id.clone(),
            mode: o.mode,
            prediction: o.prediction.clone(),
            verdict: o.verdict(),
            hop_count: o.hop_count,
            truncated: o.truncated,
            diagnostic: o.diagnostic.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TranscriptLine {
    case_id: String,
    transcript: Vec<Exchange>,
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} line {line}: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
}

fn write_lines<I, S>(path: &Path, lines: I) -> Result<(), LogError>
where
    I: IntoIterator<Item = S>,
    S: Serialize,
{
    let io = |source| LogError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for line in lines {
        serde_json::to_writer(&mut w, &line).expect("log lines always serialize");
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Header line, then one JSON object per outcome.
pub fn write_outcome_log(path: &Path, header: &LogHeader, outcomes: &[LoggedOutcome]) -> Result<(), LogError> {
    let header = serde_json::to_value(header).expect("header serializes");
    let rows = outcomes
        .iter()
        .map(|o| serde_json::to_value(o).expect("outcome serializes"));
    write_lines(path, std::iter::once(header).chain(rows))
}

pub fn read_outcome_log(path: &Path) -> Result<(LogHeader, Vec<LoggedOutcome>), LogError> {
    let name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| LogError::Io {
        path: name.clone(),
        source,
    })?;
    let malformed = |line: usize, message: String| LogError::Malformed {
        path: name.clone(),
        line,
        message,
    };
    let mut header = None;
    let mut outcomes = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| LogError::Io {
            path: name.clone(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if header.is_none() {
            let h: LogHeader = serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?;
            if h.kind != "header" {
                return Err(malformed(i + 1, "first line must be the log header".into()));
            }
            header = Some(h);
        } else {
            outcomes.push(serde_json::from_str(&line).map_err(|e| malformed(i + 1, e.to_string()))?);
        }
    }
    let header = header.ok_or_else(|| malformed(0, "missing header".into()))?;
    Ok((header, outcomes))
}

/// Full transcripts, one JSON line per case.
pub fn write_transcripts(path: &Path, outcomes: &[EvalOutcome]) -> Result<(), LogError> {
    write_lines(
        path,
        outcomes.iter().map(|o| TranscriptLine {
            case_id: o.case_id.clone(),
            transcript: o.transcript.clone(),
        }),
    )
}
