//! Chat-completion backends: the HTTP adapter, retry policy and the offline
//! mocks used for deterministic runs.

use std::collections::HashMap;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProviderError {
    /// Network failures, rate limits and server errors. Retried.
    #[error("provider unavailable: {0}")]
    Unavailable(String),
    /// Authentication or malformed responses. Not retried.
    #[error("provider rejected the request: {0}")]
    Rejected(String),
}

impl ProviderError {
    pub fn is_transient(&self) -> bool {
        matches!(self, ProviderError::Unavailable(_))
    }
}

/// Bounded exponential backoff.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            base_delay_ms: 1000,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(max_retries: u32) -> Self {
        Self {
            max_retries,
            base_delay_ms: 0,
        }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1u64 << attempt.min(20)))
    }

    /// Runs `op` until it succeeds, fails permanently or exhausts retries.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0;
        loop {
            match op() {
                Err(e) if e.is_transient() && attempt < self.max_retries => {
                    log::warn!("provider call failed (attempt {}): {e}", attempt + 1);
                    let delay = self.delay(attempt);
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

/// What a request is for. HTTP adapters ignore it; mocks dispatch on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ChatTask {
    Annotate { target: String, examples: usize },
    DescribeCode { label: String },
    NameTheme { codes: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: Option<String>,
    pub prompt: String,
    pub temperature: f64,
    pub task: ChatTask,
}

pub trait ChatBackend: Send + Sync {
    /// Identifier recorded with each run, e.g. `openai/gpt-4o`.
    fn id(&self) -> String;
    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

/// Connection settings shared by the HTTP chat and embedding adapters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpSettings {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub timeout_secs: u64,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            timeout_secs: 120,
        }
    }

    pub(crate) fn client(&self) -> Result<reqwest::blocking::Client, ProviderError> {
        reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.timeout_secs))
            .build()
            .map_err(|e| ProviderError::Rejected(e.to_string()))
    }

    pub(crate) fn post_json(
        &self,
        client: &reqwest::blocking::Client,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<serde_json::Value, ProviderError> {
        let mut req = client.post(format!("{}{}", self.base_url, path)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| ProviderError::Unavailable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(ProviderError::Unavailable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(ProviderError::Rejected(format!("HTTP {status}: {text}")));
        }
        resp.json()
            .map_err(|e| ProviderError::Rejected(format!("invalid response body: {e}")))
    }
}

/// OpenAI-compatible `/chat/completions` adapter.
pub struct HttpChat {
    settings: HttpSettings,
    client: reqwest::blocking::Client,
}

impl HttpChat {
    pub fn new(settings: HttpSettings) -> Result<Self, ProviderError> {
        let client = settings.client()?;
        Ok(Self { settings, client })
    }
}

impl ChatBackend for HttpChat {
    fn id(&self) -> String {
        format!("http:{}", self.settings.model)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        let mut messages = Vec::new();
        if let Some(system) = &request.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": request.prompt}));
        let body = json!({
            "model": self.settings.model,
            "messages": messages,
            "temperature": request.temperature,
        });
        let value = self.settings.post_json(&self.client, "/chat/completions", &body)?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or_else(|| ProviderError::Rejected("response has no message content".into()))
    }
}

/// Description every offline mock returns for a new code.
pub fn mock_description(label: &str) -> String {
    format!("Code: {label}")
}

/// Theme name every offline mock returns: the first three member labels.
pub fn mock_theme_name(codes: &[String]) -> String {
    codes.iter().take(3).cloned().collect::<Vec<_>>().join(" / ")
}

fn mock_aux(task: &ChatTask) -> Option<String> {
    match task {
        ChatTask::DescribeCode { label } => Some(mock_description(label)),
        ChatTask::NameTheme { codes } => Some(mock_theme_name(codes)),
        ChatTask::Annotate { .. } => None,
    }
}

/// Returns every target verbatim, with no highlights.
#[derive(Debug, Clone, Default)]
pub struct EchoChat;

impl ChatBackend for EchoChat {
    fn id(&self) -> String {
        "mock:echo".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match &request.task {
            ChatTask::Annotate { target, .. } => Ok(target.clone()),
            other => Ok(mock_aux(other).unwrap_or_default()),
        }
    }
}

/// Replies with a fixed annotated output per target body; unknown targets are
/// echoed.
#[derive(Debug, Clone, Default)]
pub struct ScriptedChat {
    outputs: HashMap<String, String>,
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_output(mut self, target: impl Into<String>, output: impl Into<String>) -> Self {
        self.outputs.insert(target.into(), output.into());
        self
    }

    pub fn insert(&mut self, target: impl Into<String>, output: impl Into<String>) {
        self.outputs.insert(target.into(), output.into());
    }
}

impl ChatBackend for ScriptedChat {
    fn id(&self) -> String {
        "mock:scripted".into()
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match &request.task {
            ChatTask::Annotate { target, .. } => {
                Ok(self.outputs.get(target).cloned().unwrap_or_else(|| target.clone()))
            }
            other => Ok(mock_aux(other).unwrap_or_default()),
        }
    }
}

/// Reproduces a reference annotation with probability `p(n)` where `n` is the
/// number of few-shot examples in the prompt, and otherwise emits the target
/// unannotated.
///
/// The draw for a target is a fixed hash of `(seed, target)`, so a target
/// reproduced at `n` examples is reproduced at every larger `n` as long as
/// `p` is non-decreasing.
pub struct FidelityChat {
    reference: HashMap<String, String>,
    seed: u64,
    probability: Box<dyn Fn(usize) -> f64 + Send + Sync>,
}

impl FidelityChat {
    pub fn new(
        reference: HashMap<String, String>,
        seed: u64,
        probability: impl Fn(usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            reference,
            seed,
            probability: Box::new(probability),
        }
    }

    /// `p(n) = n / (n + half)`: reaches 0.5 at `half` examples.
    pub fn saturating(reference: HashMap<String, String>, seed: u64, half: f64) -> Self {
        Self::new(reference, seed, move |n| n as f64 / (n as f64 + half))
    }

    pub fn draw(&self, target: &str) -> f64 {
        unit_hash(self.seed, target)
    }
}

impl ChatBackend for FidelityChat {
    fn id(&self) -> String {
        format!("mock:fidelity:{}", self.seed)
    }

    fn complete(&self, request: &ChatRequest) -> Result<String, ProviderError> {
        match &request.task {
            ChatTask::Annotate { target, examples } => match self.reference.get(target) {
                Some(output) if self.draw(target) < (self.probability)(*examples) => Ok(output.clone()),
                _ => Ok(target.clone()),
            },
            other => Ok(mock_aux(other).unwrap_or_default()),
        }
    }
}

/// Uniform value in `[0, 1)` derived from `(seed, text)`.
pub fn unit_hash(seed: u64, text: &str) -> f64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(text.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(bytes) >> 11) as f64 / (1u64 << 53) as f64
}

/// Hex SHA-256 of a string.
pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn retry_gives_up_after_bound() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(5).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Unavailable("down".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls.get(), 6);
    }

    #[test]
    fn retry_stops_on_permanent_error() {
        let calls = Cell::new(0);
        let result: Result<(), _> = RetryPolicy::immediate(5).run(|| {
            calls.set(calls.get() + 1);
            Err(ProviderError::Rejected("bad key".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls.get(), 1);
    }

    #[test]
    fn retry_recovers() {
        let calls = Cell::new(0);
        let result = RetryPolicy::immediate(5).run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 3 {
                Err(ProviderError::Unavailable("flaky".into()))
            } else {
                Ok(7)
            }
        });
        assert_eq!(result, Ok(7));
    }

    #[test]
    fn backoff_doubles() {
        let policy = RetryPolicy::default();
        assert_eq!(policy.delay(0), Duration::from_secs(1));
        assert_eq!(policy.delay(3), Duration::from_secs(8));
    }

    #[test]
    fn unit_hash_is_stable_and_in_range() {
        let a = unit_hash(1, "text");
        assert_eq!(a, unit_hash(1, "text"));
        assert_ne!(a, unit_hash(2, "text"));
        assert!((0.0..1.0).contains(&a));
    }

    #[test]
    fn fidelity_is_monotone_in_examples() {
        let mut reference = HashMap::new();
        reference.insert("a b".to_string(), "**a**<sup>x</sup> b".to_string());
        let chat = FidelityChat::saturating(reference, 3, 4.0);
        let req = |n| ChatRequest {
            system: None,
            prompt: String::new(),
            temperature: 0.0,
            task: ChatTask::Annotate {
                target: "a b".into(),
                examples: n,
            },
        };
        let mut reproduced = false;
        for n in 0..200 {
            let out = chat.complete(&req(n)).unwrap();
            let now = out != "a b";
            assert!(!reproduced || now, "reproduction must persist once reached");
            reproduced = now;
        }
        assert!(reproduced);
    }

    #[test]
    fn mocks_describe_codes() {
        let req = ChatRequest {
            system: None,
            prompt: String::new(),
            temperature: 0.0,
            task: ChatTask::DescribeCode { label: "x".into() },
        };
        assert_eq!(EchoChat.complete(&req).unwrap(), "Code: x");
        assert_eq!(ScriptedChat::new().complete(&req).unwrap(), "Code: x");
    }
}
