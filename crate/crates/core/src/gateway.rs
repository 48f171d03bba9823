//! Completion gateway over an HTTP chat-completion-style provider, with
//! timeout, retry, schema-checked structured output, and an explicit
//! offline signal. Callers treat `Unavailable` as the cue to engage
//! their heuristic fallback; `complete` never fails.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

pub const DEFAULT_MODEL: &str = "claude-sonnet-4-6";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub endpoint: String,
    pub model: String,
    pub api_key_env: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    pub offline: bool,
    /// Log requests and responses to stderr.
    pub trace: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint: "http://localhost:8000/v1/chat/completions".to_string(),
            model: DEFAULT_MODEL.to_string(),
            api_key_env: "SKILLOPT_API_KEY".to_string(),
            timeout_ms: 30_000,
            max_retries: 1,
            offline: true,
            trace: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub system: String,
    pub user: String,
    /// When set, the response must parse as JSON containing these
    /// top-level keys.
    pub schema_hint: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum UnavailableReason {
    Offline,
    Timeout,
    HttpError,
    SchemaInvalid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CompletionResult {
    Text(String),
    Unavailable(UnavailableReason),
}

impl CompletionResult {
    pub fn is_unavailable(&self) -> bool {
        matches!(self, CompletionResult::Unavailable(_))
    }
}

#[derive(Debug)]
pub enum TransportError {
    Timeout,
    Http(String),
}

/// Injected wire layer; swapped for a recording/replay transport in
/// tests so the pipeline runs without a provider.
pub trait Transport: Send + Sync {
    fn post(&self, body: &serde_json::Value, timeout: Duration) -> Result<String, TransportError>;
}

/// Real HTTP transport: POST with bearer token from the configured
/// environment variable.
pub struct HttpTransport {
    endpoint: String,
    api_key_env: String,
    trace: bool,
}

impl HttpTransport {
    pub fn new(endpoint: &str, api_key_env: &str, trace: bool) -> Self {
        HttpTransport {
            endpoint: endpoint.to_string(),
            api_key_env: api_key_env.to_string(),
            trace,
        }
    }
}

impl Transport for HttpTransport {
    fn post(&self, body: &serde_json::Value, timeout: Duration) -> Result<String, TransportError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| TransportError::Http(e.to_string()))?;
        let mut req = client.post(&self.endpoint).json(body);
        if let Ok(key) = std::env::var(&self.api_key_env) {
            req = req.bearer_auth(key);
        }
        if self.trace {
            eprintln!("llm-request: {body}");
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                TransportError::Timeout
            } else {
                TransportError::Http(e.to_string())
            }
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| TransportError::Http(e.to_string()))?;
        if self.trace {
            eprintln!("llm-response ({status}): {text}");
        }
        if !status.is_success() {
            return Err(TransportError::Http(format!("status {status}")));
        }
        Ok(text)
    }
}

/// Transport that records every request; used to assert offline purity
/// and to script canned responses in tests.
#[derive(Default)]
pub struct RecordingTransport {
    pub calls: AtomicUsize,
    pub responses: Mutex<Vec<Result<String, &'static str>>>,
}

impl RecordingTransport {
    pub fn with_responses(responses: Vec<Result<String, &'static str>>) -> Self {
        RecordingTransport {
            calls: AtomicUsize::new(0),
            responses: Mutex::new(responses),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for RecordingTransport {
    fn post(&self, _body: &serde_json::Value, _timeout: Duration) -> Result<String, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut responses = self.responses.lock().unwrap();
        if responses.is_empty() {
            return Err(TransportError::Http("no scripted response".to_string()));
        }
        match responses.remove(0) {
            Ok(text) => Ok(text),
            Err("timeout") => Err(TransportError::Timeout),
            Err(msg) => Err(TransportError::Http(msg.to_string())),
        }
    }
}

/// Simple token bucket guarding concurrent variant scoring.
struct RateLimiter {
    capacity: u32,
    tokens: Mutex<(f64, Instant)>,
    per_second: f64,
}

impl RateLimiter {
    fn new(capacity: u32, per_second: f64) -> Self {
        RateLimiter {
            capacity,
            tokens: Mutex::new((capacity as f64, Instant::now())),
            per_second,
        }
    }

    fn acquire(&self) {
        loop {
            {
                let mut state = self.tokens.lock().unwrap();
                let elapsed = state.1.elapsed().as_secs_f64();
                state.0 = (state.0 + elapsed * self.per_second).min(self.capacity as f64);
                state.1 = Instant::now();
                if state.0 >= 1.0 {
                    state.0 -= 1.0;
                    return;
                }
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }
}

pub struct Gateway {
    cfg: GatewayConfig,
    transport: Arc<dyn Transport>,
    limiter: RateLimiter,
}

impl Gateway {
    pub fn new(cfg: GatewayConfig) -> Self {
        let transport = Arc::new(HttpTransport::new(&cfg.endpoint, &cfg.api_key_env, cfg.trace));
        Gateway::with_transport(cfg, transport)
    }

    pub fn with_transport(cfg: GatewayConfig, transport: Arc<dyn Transport>) -> Self {
        Gateway {
            cfg,
            transport,
            limiter: RateLimiter::new(8, 4.0),
        }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.cfg
    }

    pub fn is_offline(&self) -> bool {
        self.cfg.offline
    }

    /// Issue one stateless completion. Total by construction: offline
    /// short-circuits before any I/O, retries cover timeout/5xx, and a
    /// response failing the schema hint maps to
    /// `Unavailable(SchemaInvalid)`.
    pub fn complete(&self, req: &CompletionRequest) -> CompletionResult {
        if self.cfg.offline {
            return CompletionResult::Unavailable(UnavailableReason::Offline);
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": req.system},
                {"role": "user", "content": req.user},
            ],
        });
        let timeout = Duration::from_millis(self.cfg.timeout_ms);
        let mut last = UnavailableReason::HttpError;
        for _ in 0..=self.cfg.max_retries {
            self.limiter.acquire();
            match self.transport.post(&body, timeout) {
                Ok(raw) => {
                    let content = extract_content(&raw);
                    match content {
                        Some(text) => {
                            if let Some(keys) = &req.schema_hint {
                                if !schema_ok(&text, keys) {
                                    last = UnavailableReason::SchemaInvalid;
                                    continue;
                                }
                            }
                            return CompletionResult::Text(text);
                        }
                        None => {
                            last = UnavailableReason::SchemaInvalid;
                            continue;
                        }
                    }
                }
                Err(TransportError::Timeout) => last = UnavailableReason::Timeout,
                Err(TransportError::Http(_)) => last = UnavailableReason::HttpError,
            }
        }
        CompletionResult::Unavailable(last)
    }
}

/// Pull the assistant text out of a chat-completion response body;
/// plain text bodies pass through unchanged.
fn extract_content(raw: &str) -> Option<String> {
    if let Ok(v) = serde_json::from_str::<serde_json::Value>(raw) {
        if let Some(content) = v
            .pointer("/choices/0/message/content")
            .or_else(|| v.pointer("/content/0/text"))
            .and_then(|c| c.as_str())
        {
            return Some(content.to_string());
        }
        if v.is_object() {
            // Already-structured payload: callers parse it themselves.
            return Some(raw.to_string());
        }
    }
    if raw.trim().is_empty() {
        None
    } else {
        Some(raw.to_string())
    }
}

fn schema_ok(text: &str, keys: &[String]) -> bool {
    match serde_json::from_str::<serde_json::Value>(text) {
        Ok(serde_json::Value::Object(map)) => keys.iter().all(|k| map.contains_key(k)),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req() -> CompletionRequest {
        CompletionRequest {
            system: "s".into(),
            user: "u".into(),
            schema_hint: None,
        }
    }

    #[test]
    fn offline_returns_unavailable_without_io() {
        let transport = Arc::new(RecordingTransport::default());
        let gw = Gateway::with_transport(GatewayConfig::default(), transport.clone());
        assert_eq!(
            gw.complete(&req()),
            CompletionResult::Unavailable(UnavailableReason::Offline)
        );
        assert_eq!(transport.call_count(), 0);
    }

    #[test]
    fn healthy_provider_returns_text() {
        let body = r#"{"choices":[{"message":{"content":"hello"}}]}"#;
        let transport = Arc::new(RecordingTransport::with_responses(vec![Ok(body.to_string())]));
        let cfg = GatewayConfig {
            offline: false,
            ..Default::default()
        };
        let gw = Gateway::with_transport(cfg, transport);
        assert_eq!(gw.complete(&req()), CompletionResult::Text("hello".into()));
    }

    #[test]
    fn malformed_structured_payload_after_retry_is_schema_invalid() {
        let bad = r#"{"choices":[{"message":{"content":"not json"}}]}"#;
        let transport = Arc::new(RecordingTransport::with_responses(vec![
            Ok(bad.to_string()),
            Ok(bad.to_string()),
        ]));
        let cfg = GatewayConfig {
            offline: false,
            max_retries: 1,
            ..Default::default()
        };
        let gw = Gateway::with_transport(cfg, transport);
        let mut r = req();
        r.schema_hint = Some(vec!["dimensions".to_string()]);
        assert_eq!(
            gw.complete(&r),
            CompletionResult::Unavailable(UnavailableReason::SchemaInvalid)
        );
    }

    #[test]
    fn timeouts_exhaust_retries_then_report_timeout() {
        let transport = Arc::new(RecordingTransport::with_responses(vec![
            Err("timeout"),
            Err("timeout"),
        ]));
        let cfg = GatewayConfig {
            offline: false,
            max_retries: 1,
            ..Default::default()
        };
        let gw = Gateway::with_transport(cfg, transport.clone());
        assert_eq!(
            gw.complete(&req()),
            CompletionResult::Unavailable(UnavailableReason::Timeout)
        );
        assert_eq!(transport.call_count(), 2);
    }
}
