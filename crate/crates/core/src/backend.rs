//! Completion backends.
//!
//! [`HttpBackend`] speaks the chat-completions wire shape (`POST
//! <endpoint>/chat/completions`). [`MockBackend`] answers from a lookup table
//! built from source records, which makes every run reproducible at desk scale.

use crate::model::{RunConfig, SourceRecord};
use crate::scoring::normalize;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

/// Environment variable holding the bearer token for live endpoints.
pub const API_KEY_ENV: &str = "MHOP_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("no messages to send")]
    EmptyConversation,

    #[error("user message {0} is empty")]
    EmptyUserMessage(usize),

    #[error("endpoint unreachable: {0}")]
    Unreachable(String),

    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },

    #[error("request timed out after {0:?}")]
    Timeout(Duration),

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: usize,
        #[source]
        last: Box<BackendError>,
    },

    #[error(transparent)]
    Config(#[from] crate::Error),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        match self {
            BackendError::Unreachable(_) | BackendError::Timeout(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

fn check_messages(messages: &[ChatMessage]) -> Result<(), BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyConversation);
    }
    if let Some(i) = messages
        .iter()
        .position(|m| m.role == Role::User && m.content.trim().is_empty())
    {
        return Err(BackendError::EmptyUserMessage(i));
    }
    Ok(())
}

/// Anything that can turn a conversation into a completion.
pub trait Backend: Send + Sync {
    fn complete(&self, messages: &[ChatMessage], config: &RunConfig) -> Result<String, BackendError>;

    /// Whether identical requests always yield identical completions.
    fn is_deterministic(&self) -> bool;

    fn describe(&self) -> String;
}

/// Which facts a mock is allowed to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MockScope {
    /// Every hop question maps to its hop answer.
    Hops,
    /// Every top-level question variant maps to the final answer.
    Direct,
}

impl std::str::FromStr for MockScope {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hops" => Ok(MockScope::Hops),
            "direct" => Ok(MockScope::Direct),
            other => Err(format!("unknown mock scope {other:?} (expected hops or direct)")),
        }
    }
}

pub const MOCK_FALLBACK: &str = "UNKNOWN";

/// Normalized question -> answer table. Lookups always return something.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MockKnowledge {
    answers: HashMap<String, String>,
    pub fallback: String,
}

impl Default for MockKnowledge {
    fn default() -> Self {
        Self {
            answers: HashMap::new(),
            fallback: MOCK_FALLBACK.to_string(),
        }
    }
}

impl MockKnowledge {
    pub fn insert(&mut self, question: &str, answer: impl Into<String>) {
        self.answers.insert(normalize(question), answer.into());
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn knows(&self, question: &str) -> bool {
        self.answers.contains_key(&normalize(question))
    }

    /// Answer for one user message: the whole text first, then each line from
    /// the last up, with a leading `Question:`/`Subquestion:` label removed.
    pub fn answer(&self, message: &str) -> &str {
        self.find(message).unwrap_or(&self.fallback)
    }

    fn find(&self, message: &str) -> Option<&str> {
        if let Some(a) = self.answers.get(&normalize(message)) {
            return Some(a);
        }
        message.lines().rev().find_map(|line| {
            let line = line.trim();
            let line = ["Question:", "Subquestion:"]
                .iter()
                .find_map(|label| line.strip_prefix(label))
                .unwrap_or(line);
            self.answers.get(&normalize(line)).map(String::as_str)
        })
    }
}

/// Lookup table over the given records, restricted to one scope.
pub fn build_mock_from_records(records: &[SourceRecord], scope: MockScope) -> MockKnowledge {
    let mut k = MockKnowledge::default();
    for r in records {
        match scope {
            MockScope::Hops => {
                for h in &r.hop_chain {
                    k.insert(&h.question, h.answer.clone());
                }
            }
            MockScope::Direct => {
                for q in &r.question_variants {
                    k.insert(q, r.final_answer.clone());
                }
            }
        }
    }
    k
}

/// Gold decomposition chains, keyed by normalized top-level question.
///
/// Lets the mock play the model's role in the model-driven decomposition loop:
/// given the running transcript it emits the next gold sub-question, and once
/// every hop has an intermediate answer it emits the final answer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockDecomposer {
    chains: HashMap<String, Vec<(String, String)>>,
}

impl MockDecomposer {
    pub fn from_records(records: &[SourceRecord]) -> Self {
        let mut chains = HashMap::new();
        for r in records {
            let chain: Vec<(String, String)> = r
                .hop_chain
                .iter()
                .map(|h| (h.question.clone(), h.answer.clone()))
                .collect();
            for q in &r.question_variants {
                chains.insert(normalize(q), chain.clone());
            }
        }
        Self { chains }
    }

    /// Reply to a decomposition prompt, or `None` if the message is not one this mock recognizes.
    pub fn step(&self, message: &str) -> Option<String> {
        let (question, answers) = crate::runner::DecompositionProtocol::parse_transcript(message)?;
        let chain = self.chains.get(&normalize(question))?;
        match chain.get(answers.len()) {
            Some((q, _)) => {
                // carry the transcript's answers into the next question
                let mut next = q.clone();
                if let (Some(prev_gold), Some(prev_got)) = (
                    answers.len().checked_sub(1).map(|i| chain[i].1.as_str()),
                    answers.last(),
                ) {
                    if prev_gold != *prev_got && next.contains(prev_gold) {
                        next = next.replace(prev_gold, prev_got);
                    }
                }
                Some(format!("{} {next}", crate::runner::SUBQUESTION_MARKER))
            }
            None => Some(format!(
                "{} {}",
                crate::runner::FINAL_MARKER,
                answers.last().copied().unwrap_or(MOCK_FALLBACK)
            )),
        }
    }
}

/// Deterministic table-driven backend.
///
/// Only the last user message is consulted; system text and earlier turns are ignored.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    pub knowledge: MockKnowledge,
    pub decomposer: Option<MockDecomposer>,
}

impl MockBackend {
    pub fn new(knowledge: MockKnowledge) -> Self {
        Self {
            knowledge,
            decomposer: None,
        }
    }

    pub fn with_decomposer(mut self, decomposer: MockDecomposer) -> Self {
        self.decomposer = Some(decomposer);
        self
    }
}

impl Backend for MockBackend {
    fn complete(&self, messages: &[ChatMessage], _config: &RunConfig) -> Result<String, BackendError> {
        check_messages(messages)?;
        let last = messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if let Some(reply) = self.decomposer.as_ref().and_then(|d| d.step(last)) {
            return Ok(reply);
        }
        Ok(self.knowledge.answer(last).to_string())
    }

    fn is_deterministic(&self) -> bool {
        true
    }

    fn describe(&self) -> String {
        format!("mock ({} facts)", self.knowledge.len())
    }
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: ResponseMessage,
}

#[derive(Deserialize)]
struct ResponseMessage {
    content: Option<String>,
}

/// Exponential backoff schedule between attempts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub initial: Duration,
    pub factor: f64,
    pub max: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(500),
            factor: 2.0,
            max: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32) -> Duration {
        let d = self.initial.as_secs_f64() * self.factor.powi(retry as i32);
        Duration::from_secs_f64(d.min(self.max.as_secs_f64()))
    }
}

/// Chat-completions client over blocking HTTP.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
    backoff: Backoff,
    attempts: AtomicUsize,
}

impl HttpBackend {
    /// Reads the bearer token from [`API_KEY_ENV`] when set.
    pub fn new(config: &RunConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let timeout = Duration::from_secs_f64(config.timeout_seconds);
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| BackendError::Unreachable(e.to_string()))?;
        Ok(Self {
            client,
            url: format!("{}/chat/completions", config.endpoint.trim_end_matches('/')),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
            backoff: Backoff::default(),
            attempts: AtomicUsize::new(0),
        })
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Requests sent so far, retries included.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::Relaxed)
    }

    fn attempt(&self, body: &ChatRequest<'_>, timeout: Duration) -> Result<String, BackendError> {
        self.attempts.fetch_add(1, Ordering::Relaxed);
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(timeout)
            } else {
                BackendError::Unreachable(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                BackendError::Timeout(timeout)
            } else {
                BackendError::Unreachable(e.to_string())
            }
        })?;
        if !status.is_success() {
            return Err(BackendError::Http {
                status: status.as_u16(),
                body: text.chars().take(512).collect(),
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices[0].message.content".into()))
    }
}

impl Backend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage], config: &RunConfig) -> Result<String, BackendError> {
        check_messages(messages)?;
        config.validate()?;
        let body = ChatRequest {
            model: &config.model_name,
            messages,
            temperature: config.temperature,
            max_tokens: config.max_tokens,
        };
        let timeout = Duration::from_secs_f64(config.timeout_seconds);
        let mut retry = 0;
        loop {
            match self.attempt(&body, timeout) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_transient() && retry < config.max_retries => {
                    let wait = self.backoff.delay(retry);
                    tracing::warn!("attempt {} failed ({e}); retrying in {wait:?}", retry + 1);
                    std::thread::sleep(wait);
                    retry += 1;
                }
                Err(e) if e.is_transient() && retry > 0 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts: retry as usize + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn is_deterministic(&self) -> bool {
        false
    }

    fn describe(&self) -> String {
        format!("live ({})", self.url)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{london, LONDON_QUESTION};

    fn cfg() -> RunConfig {
        RunConfig::mock()
    }

    #[test]
    fn mock_answers_known_and_unknown() {
        let mock = MockBackend::new(build_mock_from_records(&[london()], MockScope::Hops));
        let got = mock
            .complete(&[ChatMessage::user("Where is London located?")], &cfg())
            .unwrap();
        assert_eq!(got, "United Kingdom");
        let got = mock
            .complete(&[ChatMessage::user("What is the capital of Mars?")], &cfg())
            .unwrap();
        assert_eq!(got, "UNKNOWN");
    }

    #[test]
    fn mock_uses_last_user_message_only() {
        let mock = MockBackend::new(build_mock_from_records(&[london()], MockScope::Hops));
        let msgs = [
            ChatMessage::system("Where is London located?"),
            ChatMessage::user("Where is London located?"),
            ChatMessage::assistant("United Kingdom"),
            ChatMessage::user("Something unrelated"),
        ];
        assert_eq!(mock.complete(&msgs, &cfg()).unwrap(), "UNKNOWN");
    }

    #[test]
    fn mock_finds_labelled_question_lines() {
        let k = build_mock_from_records(&[london()], MockScope::Direct);
        let prompt = format!("Answer the question.\n\nQuestion: {LONDON_QUESTION}");
        assert_eq!(k.answer(&prompt), "Rishi Sunak");
    }

    #[test]
    fn scopes_do_not_leak() {
        let hops = build_mock_from_records(&[london()], MockScope::Hops);
        assert!(hops.knows("where is london located?"));
        assert!(!hops.knows(LONDON_QUESTION));
        assert_eq!(hops.len(), 2);
        let direct = build_mock_from_records(&[london()], MockScope::Direct);
        assert!(direct.knows(LONDON_QUESTION));
        assert!(!direct.knows("Where is London located?"));
        assert_eq!(direct.len(), 1);
    }

    #[test]
    fn empty_conversations_are_rejected() {
        let mock = MockBackend::default();
        assert!(matches!(mock.complete(&[], &cfg()), Err(BackendError::EmptyConversation)));
        assert!(matches!(
            mock.complete(&[ChatMessage::user("  ")], &cfg()),
            Err(BackendError::EmptyUserMessage(0))
        ));
    }

    #[test]
    fn backoff_grows_and_caps() {
        let b = Backoff {
            initial: Duration::from_millis(100),
            factor: 2.0,
            max: Duration::from_millis(350),
        };
        assert_eq!(b.delay(0), Duration::from_millis(100));
        assert_eq!(b.delay(1), Duration::from_millis(200));
        assert_eq!(b.delay(2), Duration::from_millis(350));
    }

    #[test]
    fn request_shape() {
        let msgs = [ChatMessage::system("s"), ChatMessage::user("u")];
        let body = ChatRequest {
            model: "m",
            messages: &msgs,
            temperature: 0.0,
            max_tokens: 16,
        };
        let v = serde_json::to_value(&body).unwrap();
        assert_eq!(
            v,
            serde_json::json!({
                "model": "m",
                "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "u"}],
                "temperature": 0.0,
                "max_tokens": 16
            })
        );
    }

    #[test]
    fn unreachable_endpoint_without_retries() {
        // port 9 on localhost is essentially never listening
        let config = RunConfig {
            endpoint: "http://127.0.0.1:9".into(),
            max_retries: 0,
            timeout_seconds: 2.0,
            ..RunConfig::default()
        };
        let b = HttpBackend::new(&config).unwrap();
        let err = b.complete(&[ChatMessage::user("hi")], &config).unwrap_err();
        assert!(matches!(err, BackendError::Unreachable(_)), "{err:?}");
        assert_eq!(b.attempts(), 1);
    }
}
