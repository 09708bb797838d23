//! Chat-completion clients.
//!
//! [`LlmClient`] owns the retry policy; a [`Provider`] performs one attempt.
//! Real providers speak the OpenAI, Anthropic and Gemini HTTP shapes. The
//! [`MockProvider`] replays a script and records every prompt it receives.

use std::collections::VecDeque;
use std::fmt;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

impl ChatRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ChatRole::System => "system",
            ChatRole::User => "user",
            ChatRole::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: ChatRole::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: ChatRole::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: ChatRole::Assistant, content: content.into() }
    }
}

/// `ceil(total characters / 4)` over message contents.
pub fn estimate_tokens(messages: &[ChatMessage]) -> usize {
    let chars: usize = messages.iter().map(|m| m.content.chars().count()).sum();
    chars.div_ceil(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[serde(alias = "openai-compatible")]
    Openai,
    #[serde(alias = "anthropic-compatible")]
    Anthropic,
    #[serde(alias = "gemini-compatible")]
    Gemini,
    Mock,
}

/// One scripted mock outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockStep {
    Reply(String),
    Fail(MockFailure),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockFailure {
    /// Retryable transport failure.
    Transport,
    /// Unusable payload; not retried.
    Protocol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MockExhausted {
    /// Every call after the script runs out is a transport failure.
    #[default]
    Fail,
    /// Start the script over.
    Cycle,
}

#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    #[serde(default = "default_model")]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_backoff")]
    pub backoff_base_secs: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub script: Vec<MockStep>,
    #[serde(default)]
    pub on_exhausted: MockExhausted,
}

fn default_model() -> String {
    "mock".into()
}
fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    1024
}

impl ProviderConfig {
    pub fn mock() -> Self {
        Self {
            kind: ProviderKind::Mock,
            model: default_model(),
            api_key_env: None,
            base_url: None,
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            temperature: 0.0,
            backoff_base_secs: default_backoff(),
            max_tokens: default_max_tokens(),
            script: Vec::new(),
            on_exhausted: MockExhausted::Fail,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err("timeout_secs must be positive".into());
        }
        if !(self.backoff_base_secs >= 0.0 && self.backoff_base_secs.is_finite()) {
            return Err("backoff_base_secs must be non-negative".into());
        }
        if self.kind != ProviderKind::Mock && self.api_key_env.as_deref().is_none_or(str::is_empty) {
            return Err("api_key_env is required for HTTP providers".into());
        }
        Ok(())
    }

    /// Delay slept before retry number `retry` (0-based): `base * 2^retry`.
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_secs_f64(self.backoff_base_secs * 2f64.powi(retry.min(30) as i32))
    }
}

impl fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("kind", &self.kind)
            .field("model", &self.model)
            .field("api_key_env", &self.api_key_env)
            .field("max_retries", &self.max_retries)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    pub text: String,
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
    pub latency: Duration,
    /// Attempts made, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// Result of a single provider attempt.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCompletion {
    pub text: String,
    pub prompt_tokens: Option<usize>,
    pub completion_tokens: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttemptError {
    /// Timeouts, connection failures, 429 and 5xx responses.
    Transient(String),
    /// Non-retryable rejection (4xx other than 429).
    Rejected(String),
    /// Response body without the expected shape.
    Protocol(String),
}

pub trait Provider: Send + Sync {
    fn send(&self, cfg: &ProviderConfig, messages: &[ChatMessage]) -> Result<RawCompletion, AttemptError>;

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// A provider plus its configuration and retry policy.
#[derive(Clone)]
pub struct LlmClient {
    cfg: ProviderConfig,
    provider: Arc<dyn Provider>,
}

impl fmt::Debug for LlmClient {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmClient").field("cfg", &self.cfg).finish_non_exhaustive()
    }
}

impl LlmClient {
    pub fn new(cfg: ProviderConfig, provider: Arc<dyn Provider>) -> Self {
        Self { cfg, provider }
    }

    /// Builds the provider named by `cfg`. HTTP providers read their key
    /// from the configured environment variable here, so a missing key fails
    /// before any request is made.
    pub fn from_config(cfg: &ProviderConfig) -> Result<Self, LlmError> {
        cfg.validate().map_err(LlmError::Configuration)?;
        let provider: Arc<dyn Provider> = match cfg.kind {
            ProviderKind::Mock => Arc::new(MockProvider::from_config(cfg)),
            kind => {
                let var = cfg.api_key_env.as_deref().unwrap_or_default();
                let key = std::env::var(var)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| LlmError::Configuration(format!("environment variable `{var}` is not set")))?;
                Arc::new(HttpProvider::new(kind, key, cfg)?)
            }
        };
        Ok(Self::new(cfg.clone(), provider))
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.cfg
    }

    pub fn complete(&self, messages: &[ChatMessage]) -> Result<CompletionResult, LlmError> {
        if messages.is_empty() {
            return Err(LlmError::Configuration("no messages to send".into()));
        }
        let mut attempt = 0u32;
        loop {
            let started = Instant::now();
            match self.provider.send(&self.cfg, messages) {
                Ok(raw) => {
                    let completion_tokens = raw.completion_tokens.unwrap_or_else(|| raw.text.chars().count().div_ceil(4));
                    return Ok(CompletionResult {
                        prompt_tokens: raw.prompt_tokens.unwrap_or_else(|| estimate_tokens(messages)),
                        completion_tokens,
                        text: raw.text,
                        latency: started.elapsed(),
                        attempts: attempt + 1,
                    });
                }
                Err(AttemptError::Protocol(msg)) => return Err(LlmError::Protocol(msg)),
                Err(AttemptError::Rejected(message)) => return Err(LlmError::Transport { attempts: attempt + 1, message }),
                Err(AttemptError::Transient(message)) => {
                    if attempt >= self.cfg.max_retries {
                        return Err(LlmError::Transport { attempts: attempt + 1, message });
                    }
                    log::warn!("llm attempt {} failed: {message}; retrying", attempt + 1);
                    self.provider.sleep(self.cfg.backoff(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

type Responder = Box<dyn FnMut(&[ChatMessage]) -> MockStep + Send>;

struct MockState {
    script: VecDeque<MockStep>,
    original: Vec<MockStep>,
    on_exhausted: MockExhausted,
    responder: Option<Responder>,
    calls: Vec<Vec<ChatMessage>>,
    sleeps: Vec<Duration>,
}

/// Deterministic scripted provider. Steps are consumed in order; once the
/// script is empty a responder (if any) answers, otherwise `on_exhausted`
/// applies. Backoff sleeps are recorded instead of slept.
pub struct MockProvider {
    state: Mutex<MockState>,
}

impl MockProvider {
    pub fn new(script: impl IntoIterator<Item = MockStep>) -> Self {
        let original: Vec<MockStep> = script.into_iter().collect();
        Self {
            state: Mutex::new(MockState {
                script: original.iter().cloned().collect(),
                original,
                on_exhausted: MockExhausted::Fail,
                responder: None,
                calls: Vec::new(),
                sleeps: Vec::new(),
            }),
        }
    }

    pub fn replies<S: Into<String>>(replies: impl IntoIterator<Item = S>) -> Self {
        Self::new(replies.into_iter().map(|r| MockStep::Reply(r.into())))
    }

    /// Mock that answers every call by computing a step from the prompt.
    pub fn with_responder(f: impl FnMut(&[ChatMessage]) -> MockStep + Send + 'static) -> Self {
        let m = Self::new(Vec::new());
        m.state.lock().expect("mock state").responder = Some(Box::new(f));
        m
    }

    pub fn from_config(cfg: &ProviderConfig) -> Self {
        let m = Self::new(cfg.script.clone());
        m.state.lock().expect("mock state").on_exhausted = cfg.on_exhausted;
        m
    }

    pub fn cycling(self) -> Self {
        self.state.lock().expect("mock state").on_exhausted = MockExhausted::Cycle;
        self
    }

    /// Every message list received so far, in call order.
    pub fn calls(&self) -> Vec<Vec<ChatMessage>> {
        self.state.lock().expect("mock state").calls.clone()
    }

    pub fn call_count(&self) -> usize {
        self.state.lock().expect("mock state").calls.len()
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.state.lock().expect("mock state").sleeps.clone()
    }

    fn next_step(state: &mut MockState, messages: &[ChatMessage]) -> MockStep {
        if let Some(step) = state.script.pop_front() {
            return step;
        }
        if let Some(r) = state.responder.as_mut() {
            return r(messages);
        }
        match state.on_exhausted {
            MockExhausted::Cycle if !state.original.is_empty() => {
                state.script = state.original.iter().cloned().collect();
                state.script.pop_front().expect("non-empty script")
            }
            _ => MockStep::Fail(MockFailure::Transport),
        }
    }
}

impl Provider for MockProvider {
    fn send(&self, _cfg: &ProviderConfig, messages: &[ChatMessage]) -> Result<RawCompletion, AttemptError> {
        let mut state = self.state.lock().expect("mock state");
        state.calls.push(messages.to_vec());
        match Self::next_step(&mut state, messages) {
            MockStep::Reply(text) => Ok(RawCompletion { text, prompt_tokens: None, completion_tokens: None }),
            MockStep::Fail(MockFailure::Transport) => Err(AttemptError::Transient("scripted transport failure".into())),
            MockStep::Fail(MockFailure::Protocol) => Err(AttemptError::Protocol("scripted malformed payload".into())),
        }
    }

    fn sleep(&self, d: Duration) {
        self.state.lock().expect("mock state").sleeps.push(d);
    }
}

/// Blocking HTTP provider for the three supported API families.
pub struct HttpProvider {
    kind: ProviderKind,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(kind: ProviderKind, api_key: String, cfg: &ProviderConfig) -> Result<Self, LlmError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(cfg.timeout_secs))
            .build()
            .map_err(|e| LlmError::Configuration(format!("http client: {e}")))?;
        Ok(Self { kind, api_key, http })
    }
}

/// Endpoint URL and JSON body for one request. Keys travel in headers, never
/// in the URL.
pub fn build_request(kind: ProviderKind, cfg: &ProviderConfig, messages: &[ChatMessage]) -> (String, Value) {
    match kind {
        ProviderKind::Openai | ProviderKind::Mock => {
            let base = cfg.base_url.as_deref().unwrap_or("https://api.openai.com/v1");
            let msgs: Vec<Value> = messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
            (
                format!("{}/chat/completions", base.trim_end_matches('/')),
                json!({"model": cfg.model, "messages": msgs, "temperature": cfg.temperature}),
            )
        }
        ProviderKind::Anthropic => {
            let base = cfg.base_url.as_deref().unwrap_or("https://api.anthropic.com");
            let system: Vec<&str> = messages.iter().filter(|m| m.role == ChatRole::System).map(|m| m.content.as_str()).collect();
            let turns = merge_turns(messages, "assistant");
            let mut body = json!({
                "model": cfg.model,
                "max_tokens": cfg.max_tokens,
                "temperature": cfg.temperature,
                "messages": turns.iter().map(|(r, c)| json!({"role": r, "content": c})).collect::<Vec<_>>(),
            });
            if !system.is_empty() {
                body["system"] = Value::from(system.join("\n\n"));
            }
            (format!("{}/v1/messages", base.trim_end_matches('/')), body)
        }
        ProviderKind::Gemini => {
            let base = cfg.base_url.as_deref().unwrap_or("https://generativelanguage.googleapis.com");
            let system: Vec<&str> = messages.iter().filter(|m| m.role == ChatRole::System).map(|m| m.content.as_str()).collect();
            let turns = merge_turns(messages, "model");
            let mut body = json!({
                "contents": turns.iter().map(|(r, c)| json!({"role": r, "parts": [{"text": c}]})).collect::<Vec<_>>(),
                "generationConfig": {"temperature": cfg.temperature},
            });
            if !system.is_empty() {
                body["systemInstruction"] = json!({"parts": [{"text": system.join("\n\n")}]});
            }
            (format!("{}/v1beta/models/{}:generateContent", base.trim_end_matches('/'), cfg.model), body)
        }
    }
}

/// Non-system messages with consecutive same-role turns joined, as required
/// by APIs that enforce alternation.
fn merge_turns(messages: &[ChatMessage], assistant_role: &'static str) -> Vec<(&'static str, String)> {
    let mut out: Vec<(&'static str, String)> = Vec::new();
    for m in messages.iter().filter(|m| m.role != ChatRole::System) {
        let role = if m.role == ChatRole::Assistant { assistant_role } else { "user" };
        match out.last_mut() {
            Some((r, c)) if *r == role => {
                c.push_str("\n\n");
                c.push_str(&m.content);
            }
            _ => out.push((role, m.content.clone())),
        }
    }
    out
}

pub fn parse_response(kind: ProviderKind, body: &Value) -> Result<RawCompletion, String> {
    let count = |v: &Value| v.as_u64().map(|x| x as usize);
    match kind {
        ProviderKind::Openai | ProviderKind::Mock => {
            let text = body
                .pointer("/choices/0/message/content")
                .and_then(Value::as_str)
                .ok_or("missing choices[0].message.content")?;
            Ok(RawCompletion {
                text: text.to_string(),
                prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(count),
                completion_tokens: body.pointer("/usage/completion_tokens").and_then(count),
            })
        }
        ProviderKind::Anthropic => {
            let blocks = body.get("content").and_then(Value::as_array).ok_or("missing content blocks")?;
            let text: String = blocks.iter().filter_map(|b| b.get("text").and_then(Value::as_str)).collect();
            if blocks.is_empty() {
                return Err("empty content".into());
            }
            Ok(RawCompletion {
                text,
                prompt_tokens: body.pointer("/usage/input_tokens").and_then(count),
                completion_tokens: body.pointer("/usage/output_tokens").and_then(count),
            })
        }
        ProviderKind::Gemini => {
            let parts = body
                .pointer("/candidates/0/content/parts")
                .and_then(Value::as_array)
                .ok_or("missing candidates[0].content.parts")?;
            Ok(RawCompletion {
                text: parts.iter().filter_map(|p| p.get("text").and_then(Value::as_str)).collect(),
                prompt_tokens: body.pointer("/usageMetadata/promptTokenCount").and_then(count),
                completion_tokens: body.pointer("/usageMetadata/candidatesTokenCount").and_then(count),
            })
        }
    }
}

impl Provider for HttpProvider {
    fn send(&self, cfg: &ProviderConfig, messages: &[ChatMessage]) -> Result<RawCompletion, AttemptError> {
        let (url, body) = build_request(self.kind, cfg, messages);
        let req = self.http.post(&url).json(&body);
        let req = match self.kind {
            ProviderKind::Anthropic => req.header("x-api-key", &self.api_key).header("anthropic-version", "2023-06-01"),
            ProviderKind::Gemini => req.header("x-goog-api-key", &self.api_key),
            _ => req.bearer_auth(&self.api_key),
        };
        let resp = req.send().map_err(|e| AttemptError::Transient(e.without_url().to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| AttemptError::Transient(e.without_url().to_string()))?;
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Transient(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let snippet: String = text.chars().take(200).collect();
            return Err(AttemptError::Rejected(format!("HTTP {status}: {snippet}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| AttemptError::Protocol(format!("invalid JSON body: {e}")))?;
        parse_response(self.kind, &value).map_err(AttemptError::Protocol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mock_client(p: Arc<MockProvider>, retries: u32) -> LlmClient {
        let mut cfg = ProviderConfig::mock();
        cfg.max_retries = retries;
        LlmClient::new(cfg, p)
    }

    #[test]
    fn scripted_echo() {
        let p = Arc::new(MockProvider::replies(["R1"]));
        let r = mock_client(p.clone(), 3).complete(&[ChatMessage::user("hi")]).unwrap();
        assert_eq!(r.text, "R1");
        assert_eq!(r.attempts, 1);
        assert_eq!(p.calls(), vec![vec![ChatMessage::user("hi")]]);
    }

    #[test]
    fn retries_then_succeeds() {
        let fail = MockStep::Fail(MockFailure::Transport);
        let p = Arc::new(MockProvider::new([fail.clone(), fail, MockStep::Reply("ok".into())]));
        let r = mock_client(p.clone(), 3).complete(&[ChatMessage::user("q")]).unwrap();
        assert_eq!(r.text, "ok");
        assert_eq!(r.attempts, 3);
        assert_eq!(p.sleeps(), vec![Duration::from_secs(1), Duration::from_secs(2)]);
    }

    #[test]
    fn exhaustion_is_transport_error() {
        let fail = MockStep::Fail(MockFailure::Transport);
        let p = Arc::new(MockProvider::new([fail.clone(), fail.clone(), fail]));
        let err = mock_client(p.clone(), 1).complete(&[ChatMessage::user("q")]).unwrap_err();
        assert!(matches!(err, LlmError::Transport { attempts: 2, .. }));
        assert_eq!(p.call_count(), 2);
    }

    #[test]
    fn protocol_errors_are_not_retried() {
        let p = Arc::new(MockProvider::new([MockStep::Fail(MockFailure::Protocol), MockStep::Reply("x".into())]));
        let err = mock_client(p.clone(), 3).complete(&[ChatMessage::user("q")]).unwrap_err();
        assert!(matches!(err, LlmError::Protocol(_)));
        assert_eq!(p.call_count(), 1);
    }

    #[test]
    fn missing_key_fails_before_network() {
        let mut cfg = ProviderConfig::mock();
        cfg.kind = ProviderKind::Openai;
        cfg.api_key_env = Some("HPO_TEST_SURELY_UNSET_KEY".into());
        let err = LlmClient::from_config(&cfg).unwrap_err();
        assert!(matches!(err, LlmError::Configuration(ref m) if m.contains("HPO_TEST_SURELY_UNSET_KEY")));
        cfg.api_key_env = None;
        assert!(matches!(LlmClient::from_config(&cfg), Err(LlmError::Configuration(_))));
    }

    #[test]
    fn token_estimates() {
        assert_eq!(estimate_tokens(&[ChatMessage::user("12345678")]), 2);
        assert_eq!(estimate_tokens(&[]), 0);
        assert_eq!(estimate_tokens(&[ChatMessage::user("abc"), ChatMessage::assistant("def")]), 2);
    }

    #[test]
    fn cycling_script() {
        let p = Arc::new(MockProvider::replies(["a", "b"]).cycling());
        let c = mock_client(p, 0);
        let texts: Vec<String> = (0..5).map(|_| c.complete(&[ChatMessage::user("q")]).unwrap().text).collect();
        assert_eq!(texts, ["a", "b", "a", "b", "a"]);
    }

    #[test]
    fn mock_determinism() {
        let run = || {
            let steps = vec![
                MockStep::Reply("x".into()),
                MockStep::Fail(MockFailure::Transport),
                MockStep::Reply("y".into()),
                MockStep::Fail(MockFailure::Protocol),
            ];
            let c = mock_client(Arc::new(MockProvider::new(steps)), 2);
            (0..3)
                .map(|i| c.complete(&[ChatMessage::user(format!("q{i}"))]).map(|r| (r.text, r.attempts, r.prompt_tokens)))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn request_shapes() {
        let mut cfg = ProviderConfig::mock();
        cfg.model = "m".into();
        let msgs = [ChatMessage::system("sys"), ChatMessage::user("a"), ChatMessage::user("b"), ChatMessage::assistant("c")];
        let (url, body) = build_request(ProviderKind::Openai, &cfg, &msgs);
        assert_eq!(url, "https://api.openai.com/v1/chat/completions");
        assert_eq!(body["messages"].as_array().unwrap().len(), 4);

        let (url, body) = build_request(ProviderKind::Anthropic, &cfg, &msgs);
        assert_eq!(url, "https://api.anthropic.com/v1/messages");
        assert_eq!(body["system"], "sys");
        assert_eq!(body["messages"], json!([{"role": "user", "content": "a\n\nb"}, {"role": "assistant", "content": "c"}]));

        let (url, body) = build_request(ProviderKind::Gemini, &cfg, &msgs);
        assert_eq!(url, "https://generativelanguage.googleapis.com/v1beta/models/m:generateContent");
        assert_eq!(body["contents"][1]["role"], "model");
        assert_eq!(body["systemInstruction"]["parts"][0]["text"], "sys");
    }

    #[test]
    fn response_shapes() {
        let r = parse_response(
            ProviderKind::Openai,
            &json!({"choices": [{"message": {"content": "hi"}}], "usage": {"prompt_tokens": 3, "completion_tokens": 1}}),
        )
        .unwrap();
        assert_eq!((r.text.as_str(), r.prompt_tokens, r.completion_tokens), ("hi", Some(3), Some(1)));
        let r = parse_response(ProviderKind::Anthropic, &json!({"content": [{"type": "text", "text": "yo"}]})).unwrap();
        assert_eq!(r.text, "yo");
        let r = parse_response(ProviderKind::Gemini, &json!({"candidates": [{"content": {"parts": [{"text": "g"}]}}]})).unwrap();
        assert_eq!(r.text, "g");
        assert!(parse_response(ProviderKind::Openai, &json!({"oops": 1})).is_err());
    }

    proptest! {
        #[test]
        fn token_estimate_monotone(a in proptest::collection::vec(".{0,20}", 0..5), b in proptest::collection::vec(".{0,20}", 0..5)) {
            let am: Vec<ChatMessage> = a.into_iter().map(ChatMessage::user).collect();
            let mut ab = am.clone();
            ab.extend(b.into_iter().map(ChatMessage::assistant));
            prop_assert!(estimate_tokens(&ab) >= estimate_tokens(&am));
        }

        #[test]
        fn retries_bounded_and_backoff_nondecreasing(failures in 0usize..8, retries in 0u32..5) {
            let mut steps = vec![MockStep::Fail(MockFailure::Transport); failures];
            steps.push(MockStep::Reply("ok".into()));
            let p = Arc::new(MockProvider::new(steps));
            let res = mock_client(p.clone(), retries).complete(&[ChatMessage::user("q")]);
            prop_assert!(p.call_count() as u32 <= retries + 1);
            prop_assert_eq!(res.is_ok(), failures as u32 <= retries);
            let s = p.sleeps();
            prop_assert!(s.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
