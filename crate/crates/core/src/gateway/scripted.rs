//! Deterministic offline backends.
//!
//! Three flavours: a FIFO queue of replies, a pure function of the request,
//! and a replay file of rules. Replay ordinals are counted per
//! (rule, task_id, attempt), so results do not depend on how tasks are
//! interleaved across workers.

use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::{whitespace_tokens, Backend, BackendKind, Completion, CompletionRequest, GatewayError};

type ReplyFn = dyn Fn(&CompletionRequest) -> Result<String, String> + Send + Sync;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    /// Every string must occur in the request transcript.
    #[serde(default)]
    pub contains: Vec<String>,
    /// Reply for the n-th matching request; the last one repeats.
    pub responses: Vec<String>,
}

impl ReplayRule {
    fn matches(&self, req: &CompletionRequest, transcript: &str) -> bool {
        self.phase
            .as_deref()
            .is_none_or(|p| req.context("phase") == Some(p))
            && self
                .task_id
                .as_deref()
                .is_none_or(|t| req.context("task_id") == Some(t))
            && self.contains.iter().all(|c| transcript.contains(c.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayFile {
    pub rules: Vec<ReplayRule>,
    /// Reply when no rule matches; without it such requests fail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
}

impl ReplayFile {
    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::Config(format!("{}: {e}", path.display())))
    }
}

enum Script {
    Queue(Mutex<VecDeque<String>>),
    Func(Arc<ReplyFn>),
    Replay {
        file: ReplayFile,
        ordinals: Mutex<HashMap<(usize, String, String), usize>>,
    },
}

pub struct ScriptedBackend {
    id: String,
    script: Script,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn queue<I, S>(id: impl Into<String>, replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with_script(
            id,
            Script::Queue(Mutex::new(replies.into_iter().map(Into::into).collect())),
        )
    }

    pub fn from_fn<F>(id: impl Into<String>, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> Result<String, String> + Send + Sync + 'static,
    {
        Self::with_script(id, Script::Func(Arc::new(f)))
    }

    pub fn replay(id: impl Into<String>, file: ReplayFile) -> Self {
        Self::with_script(
            id,
            Script::Replay {
                file,
                ordinals: Mutex::new(HashMap::new()),
            },
        )
    }

    fn with_script(id: impl Into<String>, script: Script) -> Self {
        ScriptedBackend {
            id: id.into(),
            script,
            calls: AtomicU64::new(0),
        }
    }

    /// Number of completions served so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn reply(&self, req: &CompletionRequest) -> Result<String, GatewayError> {
        match &self.script {
            Script::Queue(q) => q
                .lock()
                .expect("reply queue poisoned")
                .pop_front()
                .ok_or_else(|| GatewayError::ScriptExhausted(format!("queue '{}' is empty", self.id))),
            Script::Func(f) => f(req).map_err(GatewayError::Scripted),
            Script::Replay { file, ordinals } => {
                let transcript = req.transcript();
                let Some((idx, rule)) = file
                    .rules
                    .iter()
                    .enumerate()
                    .find(|(_, r)| r.matches(req, &transcript))
                else {
                    return file.fallback.clone().ok_or_else(|| {
                        GatewayError::ScriptExhausted(format!(
                            "no replay rule matches (phase={:?}, task_id={:?})",
                            req.context("phase"),
                            req.context("task_id")
                        ))
                    });
                };
                if rule.responses.is_empty() {
                    return Err(GatewayError::ScriptExhausted(format!(
                        "replay rule {idx} has no responses"
                    )));
                }
                let key = (
                    idx,
                    req.context("task_id").unwrap_or_default().to_string(),
                    req.context("attempt").unwrap_or_default().to_string(),
                );
                let mut ord = ordinals.lock().expect("replay ordinals poisoned");
                let n = ord.entry(key).or_insert(0);
                let reply = rule.responses[(*n).min(rule.responses.len() - 1)].clone();
                *n += 1;
                Ok(reply)
            }
        }
    }
}

impl Backend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Scripted
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate(self.max_temperature())?;
        self.calls.fetch_add(1, Ordering::Relaxed);
        let text = self.reply(request)?;
        let tokens_in = request
            .messages
            .iter()
            .map(|m| whitespace_tokens(&m.content))
            .sum();
        Ok(Completion {
            tokens_out: whitespace_tokens(&text),
            text,
            tokens_in,
            attempts: 1,
        })
    }
}
