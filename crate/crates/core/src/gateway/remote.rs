//! Chat-completion backend over HTTP.

use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use super::{whitespace_tokens, Backend, BackendKind, Completion, CompletionRequest, GatewayError};

/// Minimal blocking HTTP POST. Returns (status, body); `Err` means the
/// request never got a response.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Json) -> Result<(u16, String), String>;
}

pub struct ReqwestTransport {
    client: reqwest::blocking::Client,
}

impl ReqwestTransport {
    pub fn new(timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Config(e.to_string()))?;
        Ok(ReqwestTransport { client })
    }
}

impl HttpTransport for ReqwestTransport {
    fn post_json(&self, url: &str, bearer: Option<&str>, body: &Json) -> Result<(u16, String), String> {
        let mut rb = self.client.post(url).json(body);
        if let Some(key) = bearer {
            rb = rb.bearer_auth(key);
        }
        let resp = rb.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| e.to_string())?;
        Ok((status, text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Environment variable holding the bearer key.
    pub api_key_env: Option<String>,
    /// Total requests per completion, first try included.
    pub max_attempts: u32,
    pub backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub max_in_flight: usize,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "default".into(),
            api_key_env: Some("SQLFIX_API_KEY".into()),
            max_attempts: 3,
            backoff_ms: 500,
            max_backoff_ms: 8_000,
            max_in_flight: 4,
            timeout_ms: 120_000,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    in_flight: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_flight.lock().expect("limiter poisoned");
        while *n >= self.max {
            n = self.freed.wait(n).expect("limiter poisoned");
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_flight.lock().expect("limiter poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

pub struct RemoteBackend {
    id: String,
    config: RemoteConfig,
    transport: Arc<dyn HttpTransport>,
    limiter: Limiter,
}

impl RemoteBackend {
    pub fn new(id: impl Into<String>, config: RemoteConfig) -> Result<Self, GatewayError> {
        let transport = ReqwestTransport::new(Duration::from_millis(config.timeout_ms))?;
        Ok(Self::with_transport(id, config, Arc::new(transport)))
    }

    pub fn with_transport(
        id: impl Into<String>,
        config: RemoteConfig,
        transport: Arc<dyn HttpTransport>,
    ) -> Self {
        let max = config.max_in_flight.max(1);
        RemoteBackend {
            id: id.into(),
            config,
            transport,
            limiter: Limiter {
                in_flight: Mutex::new(0),
                freed: Condvar::new(),
                max,
            },
        }
    }

    fn body(&self, req: &CompletionRequest) -> Json {
        let mut body = json!({
            "model": self.config.model,
            "messages": req.messages,
            "temperature": req.temperature,
            "top_p": req.top_p,
        });
        if let Some(n) = req.max_tokens {
            body["max_tokens"] = json!(n);
        }
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        body
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .config
            .backoff_ms
            .saturating_mul(1u64 << (attempt - 1).min(16))
            .min(self.config.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

fn parse_response(req: &CompletionRequest, body: &str) -> Result<(String, u64, u64), GatewayError> {
    let v: Json = serde_json::from_str(body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| GatewayError::BadResponse("no choices[0].message.content".into()))?
        .to_string();
    let tokens_in = v["usage"]["prompt_tokens"].as_u64().unwrap_or_else(|| {
        req.messages.iter().map(|m| whitespace_tokens(&m.content)).sum()
    });
    let tokens_out = v["usage"]["completion_tokens"]
        .as_u64()
        .unwrap_or_else(|| whitespace_tokens(&text));
    Ok((text, tokens_in, tokens_out))
}

fn is_transient(status: u16) -> bool {
    status == 408 || status == 429 || status >= 500
}

impl Backend for RemoteBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Remote
    }

    fn complete(&self, request: &CompletionRequest) -> Result<Completion, GatewayError> {
        request.validate(self.max_temperature())?;
        let key = match &self.config.api_key_env {
            Some(var) => std::env::var(var).ok(),
            None => None,
        };
        let body = self.body(request);
        let max_attempts = self.config.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                std::thread::sleep(self.backoff(attempt - 1));
            }
            let result = {
                let _permit = self.limiter.acquire();
                self.transport
                    .post_json(&self.config.endpoint, key.as_deref(), &body)
            };
            match result {
                Ok((200..=299, text)) => {
                    let (text, tokens_in, tokens_out) = parse_response(request, &text)?;
                    return Ok(Completion {
                        text,
                        tokens_in,
                        tokens_out,
                        attempts: attempt,
                    });
                }
                Ok((status, text)) if is_transient(status) => {
                    log::warn!("{}: attempt {attempt} got status {status}", self.id);
                    last = format!("status {status}: {text}");
                }
                Ok((status, text)) => return Err(GatewayError::Rejected { status, body: text }),
                Err(e) => {
                    log::warn!("{}: attempt {attempt} failed: {e}", self.id);
                    last = e;
                }
            }
        }
        Err(GatewayError::RetriesExhausted {
            attempts: max_attempts,
            last,
        })
    }
}
