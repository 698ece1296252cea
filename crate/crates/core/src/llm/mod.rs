//! Chat-completion gateway: request/response types, retry with jittered
//! exponential backoff, a global in-flight cap, and pluggable backends
//! (OpenAI-compatible HTTP or a scripted mock).

mod http;
mod mock;

use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use http::OpenAiBackend;
pub use mock::{MockBackend, MockScript};

pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_RETRIES: u32 = 3;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

pub const ENV_URL: &str = "QREFORM_LLM_URL";
pub const ENV_API_KEY: &str = "QREFORM_LLM_API_KEY";
pub const ENV_MODEL: &str = "QREFORM_LLM_MODEL";
pub const ENV_MOCK_SCRIPT: &str = "QREFORM_MOCK_SCRIPT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
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

fn default_max_tokens() -> u32 {
    DEFAULT_MAX_TOKENS
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

/// OpenAI-compatible chat-completions request body.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    #[serde(default)]
    pub model: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self {
            model: String::new(),
            messages,
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: DEFAULT_TEMPERATURE,
            seed: None,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Stable hash of the `role:content` sequence. Sampling parameters and the
    /// model name are excluded.
    pub fn fingerprint(&self) -> String {
        fingerprint_messages(&self.messages)
    }

    pub fn last_user(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("no messages".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest("temperature must be finite and >= 0".into()));
        }
        Ok(())
    }
}

pub fn fingerprint_messages(messages: &[ChatMessage]) -> String {
    let mut hasher = Sha256::new();
    for m in messages {
        // length prefix keeps `a:b` + `c` distinct from `a:` + `bc`
        hasher.update(m.role.as_str().as_bytes());
        hasher.update(b":");
        hasher.update(m.content.len().to_string().as_bytes());
        hasher.update(b":");
        hasher.update(m.content.as_bytes());
        hasher.update(b"\n");
    }
    hex::encode(hasher.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: String,
    pub usage: Usage,
}

/// Failure reported by a single backend attempt.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    /// Worth retrying: timeouts, connection failures, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("malformed response: {0}")]
    Protocol(String),
    #[error("no scripted response for fingerprint {0}")]
    ScriptGap(String),
    #[error("request rejected: {0}")]
    Fatal(String),
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failed after {} attempts: {}", attempts.len(), attempts.join("; "))]
    Transport { attempts: Vec<String> },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("mock script has no entry for fingerprint {fingerprint}")]
    ScriptGap { fingerprint: String },
    #[error("request rejected: {0}")]
    Rejected(String),
    #[error("gateway configuration: {0}")]
    Config(String),
}

/// One chat-completion service.
pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: DEFAULT_MAX_RETRIES,
            base_delay: Duration::from_millis(250),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based): half the capped
    /// exponential step plus a uniform jitter over the other half.
    pub fn delay(&self, attempt: u32) -> Duration {
        let step = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
            .min(self.max_delay);
        if step.is_zero() {
            return step;
        }
        let half = step / 2;
        let jitter = rand::rng().random_range(0.0..=1.0);
        half + half.mul_f64(jitter)
    }
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimiter {
    cap: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(cap: usize) -> Self {
        Self {
            cap: cap.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        while *active >= self.cap {
            active = self.freed.wait(active).unwrap_or_else(|e| e.into_inner());
        }
        *active += 1;
        Permit { limiter: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock().unwrap_or_else(|e| e.into_inner());
        *active -= 1;
        self.limiter.freed.notify_one();
    }
}

/// Where requests go.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Mock { script: PathBuf },
    Http {
        url: String,
        #[serde(default, skip_serializing)]
        api_key: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    pub backend: BackendConfig,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
}

fn default_retries() -> u32 {
    DEFAULT_MAX_RETRIES
}

fn default_in_flight() -> usize {
    DEFAULT_MAX_IN_FLIGHT
}

impl GatewayConfig {
    pub fn mock(script: impl Into<PathBuf>) -> Self {
        Self {
            backend: BackendConfig::Mock {
                script: script.into(),
            },
            model: String::new(),
            max_retries: DEFAULT_MAX_RETRIES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    /// Reads the backend from the environment. A mock script path takes
    /// precedence over an endpoint URL.
    pub fn from_env() -> Option<Self> {
        let model = std::env::var(ENV_MODEL).unwrap_or_default();
        let backend = if let Ok(script) = std::env::var(ENV_MOCK_SCRIPT) {
            BackendConfig::Mock {
                script: script.into(),
            }
        } else if let Ok(url) = std::env::var(ENV_URL) {
            BackendConfig::Http {
                url,
                api_key: std::env::var(ENV_API_KEY).ok(),
            }
        } else {
            return None;
        };
        Some(Self {
            backend,
            model,
            max_retries: DEFAULT_MAX_RETRIES,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        })
    }

    pub fn connect(&self) -> Result<LlmGateway, GatewayError> {
        let backend: Arc<dyn ChatBackend> = match &self.backend {
            BackendConfig::Mock { script } => Arc::new(MockBackend::new(MockScript::load(script)?)),
            BackendConfig::Http { url, api_key } => {
                let key = api_key.clone().or_else(|| std::env::var(ENV_API_KEY).ok());
                Arc::new(OpenAiBackend::new(url, key))
            }
        };
        Ok(LlmGateway::new(backend)
            .with_model(self.model.clone())
            .with_retry(RetryPolicy {
                max_retries: self.max_retries,
                ..RetryPolicy::default()
            })
            .with_max_in_flight(self.max_in_flight))
    }
}

/// Retrying, rate-limited front end over a [`ChatBackend`].
#[derive(Clone)]
pub struct LlmGateway {
    backend: Arc<dyn ChatBackend>,
    retry: RetryPolicy,
    limiter: Arc<InFlightLimiter>,
    model: String,
}

impl fmt::Debug for LlmGateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LlmGateway")
            .field("retry", &self.retry)
            .field("max_in_flight", &self.limiter.cap())
            .field("model", &self.model)
            .finish()
    }
}

impl LlmGateway {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            limiter: Arc::new(InFlightLimiter::new(DEFAULT_MAX_IN_FLIGHT)),
            model: String::new(),
        }
    }

    pub fn mock(script: MockScript) -> Self {
        Self::new(Arc::new(MockBackend::new(script)))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.limiter = Arc::new(InFlightLimiter::new(cap));
        self
    }

    pub fn with_model(mut self, model: impl Into<String>) -> Self {
        self.model = model.into();
        self
    }

    pub fn model(&self) -> &str {
        &self.model
    }

    /// Sends `request`, retrying transient failures. A request with an empty
    /// model name is sent with the gateway's model.
    pub fn complete_chat(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let owned;
        let request = if request.model.is_empty() && !self.model.is_empty() {
            owned = ChatRequest {
                model: self.model.clone(),
                ..request.clone()
            };
            &owned
        } else {
            request
        };

        let mut attempts = Vec::new();
        for attempt in 0..=self.retry.max_retries {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.backend.send(request)
            };
            match outcome {
                Ok(response) => return Ok(response),
                Err(BackendError::Transient(msg)) => {
                    log::warn!("chat attempt {} failed: {msg}", attempt + 1);
                    attempts.push(format!("attempt {}: {msg}", attempt + 1));
                    if attempt < self.retry.max_retries {
                        std::thread::sleep(self.retry.delay(attempt));
                    }
                }
                Err(BackendError::Protocol(msg)) => return Err(GatewayError::Protocol(msg)),
                Err(BackendError::ScriptGap(fingerprint)) => {
                    return Err(GatewayError::ScriptGap { fingerprint })
                }
                Err(BackendError::Fatal(msg)) => return Err(GatewayError::Rejected(msg)),
            }
        }
        Err(GatewayError::Transport { attempts })
    }

    /// Convenience: content of the completion.
    pub fn complete_text(&self, request: &ChatRequest) -> Result<String, GatewayError> {
        self.complete_chat(request).map(|r| r.content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn fast(gateway: LlmGateway, retries: u32) -> LlmGateway {
        gateway.with_retry(RetryPolicy {
            max_retries: retries,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        })
    }

    struct Flaky {
        failures: usize,
        calls: AtomicUsize,
    }

    impl ChatBackend for Flaky {
        fn send(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.failures {
                Err(BackendError::Transient(format!("boom {n}")))
            } else {
                Ok(ChatResponse {
                    content: format!("ok after {n}"),
                    finish_reason: "stop".into(),
                    usage: Usage::default(),
                })
            }
        }
    }

    fn request() -> ChatRequest {
        ChatRequest::new(vec![ChatMessage::system("s"), ChatMessage::user("u")])
    }

    #[test]
    fn defaults_on_the_wire() {
        let json = serde_json::to_value(request()).unwrap();
        assert_eq!(json["max_tokens"], 512);
        assert_eq!(json["temperature"], 1.0);
        assert_eq!(json["messages"][0]["role"], "system");
        assert!(json.get("seed").is_none());
    }

    #[test]
    fn fingerprint_ignores_sampling_params() {
        let a = request();
        let mut b = request().with_seed(9);
        b.temperature = 0.2;
        b.max_tokens = 7;
        b.model = "other".into();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let c = ChatRequest::new(vec![ChatMessage::system("s"), ChatMessage::user("v")]);
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn fingerprint_separates_message_boundaries() {
        let a = fingerprint_messages(&[ChatMessage::user("ab"), ChatMessage::user("c")]);
        let b = fingerprint_messages(&[ChatMessage::user("a"), ChatMessage::user("bc")]);
        assert_ne!(a, b);
    }

    #[test]
    fn retries_then_succeeds_once() {
        let backend = Arc::new(Flaky {
            failures: 2,
            calls: AtomicUsize::new(0),
        });
        let gw = fast(LlmGateway::new(backend.clone()), 3);
        let resp = gw.complete_chat(&request()).unwrap();
        assert_eq!(resp.content, "ok after 2");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_carry_attempt_log() {
        let backend = Arc::new(Flaky {
            failures: 100,
            calls: AtomicUsize::new(0),
        });
        let gw = fast(LlmGateway::new(backend.clone()), 3);
        match gw.complete_chat(&request()) {
            Err(GatewayError::Transport { attempts }) => {
                assert_eq!(attempts.len(), 4);
                assert!(attempts[3].contains("boom 3"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(backend.calls.load(Ordering::SeqCst), 4);
    }

    #[test]
    fn empty_request_rejected() {
        let gw = LlmGateway::mock(MockScript::default());
        let err = gw.complete_chat(&ChatRequest::new(vec![])).unwrap_err();
        assert!(matches!(err, GatewayError::InvalidRequest(_)));
    }

    #[test]
    fn backoff_is_bounded_and_grows() {
        let policy = RetryPolicy {
            max_retries: 3,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(350),
        };
        for _ in 0..20 {
            let d0 = policy.delay(0);
            assert!(d0 >= Duration::from_millis(50) && d0 <= Duration::from_millis(100));
            let d3 = policy.delay(3);
            assert!(d3 >= Duration::from_millis(175) && d3 <= Duration::from_millis(350));
        }
    }

    struct Gauge {
        active: AtomicUsize,
        peak: AtomicUsize,
    }

    impl ChatBackend for Gauge {
        fn send(&self, _request: &ChatRequest) -> Result<ChatResponse, BackendError> {
            let now = self.active.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.active.fetch_sub(1, Ordering::SeqCst);
            Ok(ChatResponse {
                content: String::new(),
                finish_reason: "stop".into(),
                usage: Usage::default(),
            })
        }
    }

    #[test]
    fn in_flight_cap_is_respected() {
        let backend = Arc::new(Gauge {
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let gw = LlmGateway::new(backend.clone()).with_max_in_flight(2);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| gw.complete_chat(&request()).unwrap());
            }
        });
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
        assert!(backend.peak.load(Ordering::SeqCst) >= 1);
    }

    fn arb_message() -> impl Strategy<Value = ChatMessage> {
        (
            prop_oneof![Just(Role::System), Just(Role::User), Just(Role::Assistant)],
            ".*",
        )
            .prop_map(|(role, content)| ChatMessage { role, content })
    }

    proptest! {
        #[test]
        fn request_json_round_trip(
            messages in prop::collection::vec(arb_message(), 1..5),
            model in "[a-zA-Z0-9./-]{0,20}",
            max_tokens in 1u32..4096,
            temperature in 0.0f64..2.0,
            seed in prop::option::of(any::<u64>()),
        ) {
            let req = ChatRequest { model, messages, max_tokens, temperature, seed };
            let json = serde_json::to_string(&req).unwrap();
            let back: ChatRequest = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, req);
        }
    }
}
