//! Completion interface over model backends.

pub mod parse;
pub mod remote;
pub mod scripted;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{
    extract_sql_fence, fenced_block, parse_action, parse_action_prefilled, parse_tagged, parse_tagged_prefilled,
    parse_turn, tag_content, ParseError, Tag,
};
pub use remote::{HttpTransport, RemoteBackend, RemoteConfig, ReqwestTransport};
pub use scripted::{ReplayFile, ReplayRule, ScriptedBackend};

pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_TOP_P: f64 = 0.95;

/// Observation recorded when a turn is consumed by unparseable output.
pub const MALFORMED_OBSERVATION: &str = "malformed output";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    pub backend_id: String,
    /// Routing labels (task_id, attempt, phase). Never sent to remote
    /// endpoints; scripted backends key their replies on them.
    #[serde(default)]
    pub context: BTreeMap<String, String>,
}

impl CompletionRequest {
    pub fn new(backend_id: impl Into<String>, messages: Vec<Message>) -> Self {
        CompletionRequest {
            messages,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: None,
            stop_sequences: Vec::new(),
            backend_id: backend_id.into(),
            context: BTreeMap::new(),
        }
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn with_max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = Some(n);
        self
    }

    pub fn with_context(mut self, key: &str, value: impl ToString) -> Self {
        self.context.insert(key.to_string(), value.to_string());
        self
    }

    pub fn context(&self, key: &str) -> Option<&str> {
        self.context.get(key).map(String::as_str)
    }

    /// All message text joined, for rule matching.
    pub fn transcript(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn validate(&self, max_temperature: f64) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::EmptyMessages);
        }
        if !(0.0..=max_temperature).contains(&self.temperature) {
            return Err(GatewayError::Temperature {
                value: self.temperature,
                max: max_temperature,
            });
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::TopP(self.top_p));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
    /// Requests sent to produce this completion, retries included.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("request has no messages")]
    EmptyMessages,
    #[error("temperature {value} outside [0, {max}]")]
    Temperature { value: f64, max: f64 },
    #[error("top_p {0} outside (0, 1]")]
    TopP(f64),
    #[error("unknown backend '{0}'")]
    UnknownBackend(String),
    #[error("gave up after {attempts} attempt(s): {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    BadResponse(String),
    #[error("script exhausted: {0}")]
    ScriptExhausted(String),
    #[error("scripted failure: {0}")]
    Scripted(String),
    #[error("configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    Remote,
    Scripted,
}

pub trait Backend: Send + Sync {
    fn id(&self) -> &str;

    fn kind(&self) -> BackendKind;

    fn max_temperature(&self) -> f64 {
        2.0
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError>;
}

/// Whitespace token count used for offline cost accounting.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Registry of backends by id.
#[derive(Clone, Default)]
pub struct Gateway {
    backends: HashMap<String, Arc<dyn Backend>>,
}

impl Gateway {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, backend: Arc<dyn Backend>) -> &mut Self {
        self.backends.insert(backend.id().to_string(), backend);
        self
    }

    pub fn get(&self, id: &str) -> Result<Arc<dyn Backend>, GatewayError> {
        self.backends
            .get(id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownBackend(id.to_string()))
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        let backend = self.get(&request.backend_id)?;
        request.validate(backend.max_temperature())?;
        backend.complete(request)
    }
}

/// Result of a request whose reply must parse.
#[derive(Debug, Clone, PartialEq)]
pub struct Parsed<T> {
    /// `Err` holds the last parse error after the re-ask also failed.
    pub value: Result<T, ParseError>,
    pub asks: u32,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub raw: Vec<String>,
}

/// Sends `request`; if the reply does not parse, re-asks once with the bad
/// reply and `corrective` appended. Backend errors propagate.
pub fn complete_parsed<T>(
    backend: &dyn Backend,
    request: &CompletionRequest,
    corrective: &str,
    parse: impl Fn(&str) -> Result<T, ParseError>,
) -> Result<Parsed<T>, GatewayError> {
    request.validate(backend.max_temperature())?;
    let first = backend.complete(request)?;
    let mut out = Parsed {
        value: parse(&first.text),
        asks: 1,
        tokens_in: first.tokens_in,
        tokens_out: first.tokens_out,
        raw: vec![first.text.clone()],
    };
    if out.value.is_ok() {
        return Ok(out);
    }
    let mut retry = request.clone();
    retry.messages.push(Message::assistant(first.text));
    retry.messages.push(Message::user(corrective));
    retry.context.insert("reask".into(), "1".into());
    let second = backend.complete(&retry)?;
    out.value = parse(&second.text);
    out.asks = 2;
    out.tokens_in += second.tokens_in;
    out.tokens_out += second.tokens_out;
    out.raw.push(second.text);
    Ok(out)
}
