//! Chat-completion backends: a scripted backend for offline runs and an
//! OpenAI-style HTTP backend for live runs.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::retry::RetryPolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LlmRole {
    Planner,
    Rewriter,
    Generator,
    Answerer,
}

impl LlmRole {
    pub const ALL: [LlmRole; 4] = [LlmRole::Planner, LlmRole::Rewriter, LlmRole::Generator, LlmRole::Answerer];

    pub fn default_max_output(self) -> u32 {
        match self {
            LlmRole::Planner => 1024,
            LlmRole::Rewriter => 512,
            LlmRole::Generator => 2048,
            LlmRole::Answerer => 512,
        }
    }
}

impl fmt::Display for LlmRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub role: LlmRole,
    pub prompt: String,
    pub max_output: u32,
    pub temperature: f64,
}

impl LlmRequest {
    /// Request with the role's default output budget and temperature 0.
    pub fn new(role: LlmRole, prompt: impl Into<String>) -> Self {
        LlmRequest { role, prompt: prompt.into(), max_output: role.default_max_output(), temperature: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmResponse {
    pub text: String,
    /// Wall-clock latency, reported by live backends only.
    pub latency: Option<Duration>,
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("empty prompt")]
    EmptyPrompt,
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend refused the request: {0}")]
    BackendRefusal(String),
    #[error("script has no {0} entry left")]
    ScriptExhausted(LlmRole),
    #[error("script parse error: {0}")]
    ScriptParse(String),
    #[error("missing environment variable {0}")]
    MissingCredential(String),
}

pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;

    /// Scripted backends require serialized same-role calls.
    fn is_scripted(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub role: LlmRole,
    pub response: String,
}

/// Ordered canned responses, consumed per role in sequence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LlmScript {
    pub entries: Vec<ScriptEntry>,
}

impl LlmScript {
    pub fn parse(text: &str) -> Result<Self, LlmError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let inner = e.inner();
            LlmError::ScriptParse(format!(
                "line {} column {} at `{}`: {}",
                inner.line(),
                inner.column(),
                e.path(),
                inner
            ))
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("script serializes")
    }
}

pub fn load_script(path: &Path) -> Result<LlmScript, LlmError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LlmError::ScriptParse(format!("{}: {e}", path.display())))?;
    LlmScript::parse(&text)
}

/// Replays an [`LlmScript`]. Matching is by role and per-role sequence
/// index; prompt text is recorded but never consulted.
#[derive(Debug)]
pub struct ScriptedBackend {
    by_role: HashMap<LlmRole, Vec<String>>,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    cursors: HashMap<LlmRole, usize>,
    calls: Vec<(LlmRole, String)>,
}

impl ScriptedBackend {
    pub fn new(script: LlmScript) -> Self {
        let mut by_role: HashMap<LlmRole, Vec<String>> = HashMap::new();
        for e in script.entries {
            by_role.entry(e.role).or_default().push(e.response);
        }
        ScriptedBackend { by_role, state: Mutex::new(ScriptState::default()) }
    }

    pub fn from_path(path: &Path) -> Result<Self, LlmError> {
        Ok(Self::new(load_script(path)?))
    }

    /// Every call made so far, as `(role, prompt)`.
    pub fn calls(&self) -> Vec<(LlmRole, String)> {
        self.state.lock().expect("script lock").calls.clone()
    }

    pub fn call_count(&self, role: LlmRole) -> usize {
        self.state.lock().expect("script lock").calls.iter().filter(|(r, _)| *r == role).count()
    }

    pub fn remaining(&self, role: LlmRole) -> usize {
        let used = self.state.lock().expect("script lock").cursors.get(&role).copied().unwrap_or(0);
        self.by_role.get(&role).map_or(0, |v| v.len() - used)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if request.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let mut state = self.state.lock().expect("script lock");
        state.calls.push((request.role, request.prompt.clone()));
        let cursor = state.cursors.entry(request.role).or_insert(0);
        let text = self
            .by_role
            .get(&request.role)
            .and_then(|v| v.get(*cursor))
            .ok_or(LlmError::ScriptExhausted(request.role))?
            .clone();
        *cursor += 1;
        Ok(LlmResponse { text, latency: None })
    }

    fn is_scripted(&self) -> bool {
        true
    }
}

/// Settings for an OpenAI-style `chat/completions` endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatEndpointConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
}

pub struct ChatCompletionBackend {
    config: ChatEndpointConfig,
    api_key: String,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
}

impl ChatCompletionBackend {
    pub fn new(config: ChatEndpointConfig) -> Result<Self, LlmError> {
        let api_key = std::env::var(&config.api_key_env)
            .map_err(|_| LlmError::MissingCredential(config.api_key_env.clone()))?;
        Ok(Self::with_key(config, api_key))
    }

    pub fn with_key(config: ChatEndpointConfig, api_key: String) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("http client builds");
        ChatCompletionBackend { config, api_key, client, retry: RetryPolicy::default() }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn send_once(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let body = serde_json::json!({
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": request.prompt}],
            "temperature": request.temperature,
            "max_tokens": request.max_output,
        });
        let resp = self
            .client
            .post(&self.config.endpoint_url)
            .bearer_auth(&self.api_key)
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(LlmError::BackendRefusal(format!("HTTP {}: {}", status.as_u16(), snippet(&text))));
        }
        let parsed: ChatCompletion = serde_json::from_str(&text)
            .map_err(|e| LlmError::BackendRefusal(format!("unreadable completion: {e}")))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::BackendRefusal("no choices returned".into()))?;
        if choice.finish_reason.as_deref() == Some("content_filter") {
            return Err(LlmError::BackendRefusal("content filter".into()));
        }
        Ok(choice.message.content.unwrap_or_default())
    }
}

impl LlmBackend for ChatCompletionBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        if request.prompt.trim().is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let start = Instant::now();
        let text = self.retry.run(|| self.send_once(request), |e| matches!(e, LlmError::Transport(_)))?;
        Ok(LlmResponse { text, latency: Some(start.elapsed()) })
    }
}

#[derive(Deserialize)]
struct ChatCompletion {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatMessage {
    #[serde(default)]
    content: Option<String>,
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

/// Wraps a backend and keeps every response, so a live run can be saved as
/// a replayable script.
pub struct RecordingBackend {
    inner: Arc<dyn LlmBackend>,
    log: Mutex<Vec<ScriptEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn LlmBackend>) -> Self {
        RecordingBackend { inner, log: Mutex::new(Vec::new()) }
    }

    pub fn script(&self) -> LlmScript {
        LlmScript { entries: self.log.lock().expect("record lock").clone() }
    }
}

impl LlmBackend for RecordingBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        let resp = self.inner.complete(request)?;
        self.log
            .lock()
            .expect("record lock")
            .push(ScriptEntry { role: request.role, response: resp.text.clone() });
        Ok(resp)
    }

    fn is_scripted(&self) -> bool {
        self.inner.is_scripted()
    }
}

/// Routes each role to its backend.
#[derive(Clone)]
pub struct LlmRouter {
    backends: HashMap<LlmRole, Arc<dyn LlmBackend>>,
}

impl LlmRouter {
    /// One backend for every role.
    pub fn uniform(backend: Arc<dyn LlmBackend>) -> Self {
        LlmRouter { backends: LlmRole::ALL.iter().map(|r| (*r, backend.clone())).collect() }
    }

    pub fn with_role(mut self, role: LlmRole, backend: Arc<dyn LlmBackend>) -> Self {
        self.backends.insert(role, backend);
        self
    }

    pub fn complete(&self, role: LlmRole, prompt: impl Into<String>) -> Result<LlmResponse, LlmError> {
        self.backends[&role].complete(&LlmRequest::new(role, prompt))
    }

    pub fn is_scripted(&self) -> bool {
        self.backends.values().any(|b| b.is_scripted())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    fn script(entries: &[(LlmRole, &str)]) -> LlmScript {
        LlmScript {
            entries: entries.iter().map(|(r, s)| ScriptEntry { role: *r, response: s.to_string() }).collect(),
        }
    }

    #[test]
    fn scripted_replay_then_exhaustion() {
        let backend = ScriptedBackend::new(script(&[(LlmRole::Planner, "{\"plan\":1}")]));
        let req = LlmRequest::new(LlmRole::Planner, "anything");
        assert_eq!(backend.complete(&req).unwrap().text, "{\"plan\":1}");
        assert!(matches!(backend.complete(&req), Err(LlmError::ScriptExhausted(LlmRole::Planner))));
        assert_eq!(req, LlmRequest::new(LlmRole::Planner, "anything"));
    }

    #[test]
    fn cursors_are_per_role() {
        let backend = ScriptedBackend::new(script(&[
            (LlmRole::Rewriter, "KEEP"),
            (LlmRole::Planner, "p1"),
            (LlmRole::Rewriter, "r2"),
        ]));
        assert_eq!(backend.complete(&LlmRequest::new(LlmRole::Rewriter, "p")).unwrap().text, "KEEP");
        assert_eq!(backend.complete(&LlmRequest::new(LlmRole::Planner, "p")).unwrap().text, "p1");
        assert_eq!(backend.complete(&LlmRequest::new(LlmRole::Rewriter, "p")).unwrap().text, "r2");
        assert_eq!(backend.call_count(LlmRole::Rewriter), 2);
        assert_eq!(backend.remaining(LlmRole::Rewriter), 0);
    }

    #[test]
    fn load_script_cases() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.json");
        std::fs::write(
            &good,
            r#"{"entries":[{"role":"Planner","response":"a"},{"role":"Rewriter","response":"KEEP"},{"role":"Answerer","response":"ANSWER: B"}]}"#,
        )
        .unwrap();
        assert_eq!(load_script(&good).unwrap().entries.len(), 3);

        let bad = dir.path().join("bad.json");
        std::fs::write(&bad, "{\"entries\":[\n{\"response\":\"a\"}]}").unwrap();
        let err = load_script(&bad).unwrap_err().to_string();
        assert!(err.contains("role") && err.contains("line 2"), "{err}");

        let empty = dir.path().join("empty.json");
        std::fs::write(&empty, r#"{"entries":[]}"#).unwrap();
        let backend = ScriptedBackend::new(load_script(&empty).unwrap());
        assert!(matches!(
            backend.complete(&LlmRequest::new(LlmRole::Generator, "x")),
            Err(LlmError::ScriptExhausted(_))
        ));
    }

    #[test]
    fn requests_default_to_temperature_zero() {
        let req = LlmRequest::new(LlmRole::Answerer, "q");
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.max_output, 512);
    }

    /// Serves the given raw HTTP responses in order on a loopback socket.
    fn serve(responses: Vec<String>) -> (String, std::thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let handle = std::thread::spawn(move || {
            let mut seen = Vec::new();
            for body in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut buf = [0u8; 8192];
                let n = stream.read(&mut buf).unwrap();
                seen.push(String::from_utf8_lossy(&buf[..n]).to_string());
                stream.write_all(body.as_bytes()).unwrap();
            }
            seen
        });
        (url, handle)
    }

    fn http(status: &str, body: &str) -> String {
        format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        )
    }

    fn live(url: String) -> ChatCompletionBackend {
        ChatCompletionBackend::with_key(
            ChatEndpointConfig { endpoint_url: url, model_name: "m".into(), api_key_env: "UNUSED".into() },
            "secret".into(),
        )
        .with_retry(RetryPolicy { attempts: 2, base_delay: Duration::from_millis(5) })
    }

    #[test]
    fn live_backend_reads_completion_and_latency() {
        let (url, handle) = serve(vec![http(
            "200 OK",
            r#"{"choices":[{"message":{"content":"ANSWER: C"},"finish_reason":"stop"}]}"#,
        )]);
        let resp = live(url).complete(&LlmRequest::new(LlmRole::Answerer, "pick")).unwrap();
        assert_eq!(resp.text, "ANSWER: C");
        assert!(resp.latency.is_some());
        let seen = handle.join().unwrap();
        assert!(seen[0].to_lowercase().contains("authorization: bearer secret"));
        assert!(seen[0].contains("\"temperature\":0.0"));
    }

    #[test]
    fn live_backend_maps_refusals() {
        let (url, handle) = serve(vec![
            http("403 Forbidden", r#"{"error":"no"}"#),
            http("200 OK", r#"{"choices":[{"message":{"content":""},"finish_reason":"content_filter"}]}"#),
        ]);
        let backend = live(url);
        assert!(matches!(
            backend.complete(&LlmRequest::new(LlmRole::Planner, "x")),
            Err(LlmError::BackendRefusal(m)) if m.contains("403")
        ));
        assert!(matches!(backend.complete(&LlmRequest::new(LlmRole::Planner, "x")), Err(LlmError::BackendRefusal(_))));
        handle.join().unwrap();
    }

    #[test]
    fn live_backend_retries_transport_failure_once() {
        // Nothing listens on this port once the listener is dropped.
        let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let backend = live(format!("http://{addr}/"));
        assert!(matches!(backend.complete(&LlmRequest::new(LlmRole::Planner, "x")), Err(LlmError::Transport(_))));
    }

    #[test]
    fn recorder_produces_replayable_script() {
        let inner = Arc::new(ScriptedBackend::new(script(&[(LlmRole::Planner, "a"), (LlmRole::Answerer, "b")])));
        let rec = RecordingBackend::new(inner);
        rec.complete(&LlmRequest::new(LlmRole::Planner, "x")).unwrap();
        rec.complete(&LlmRequest::new(LlmRole::Answerer, "y")).unwrap();
        let replay = ScriptedBackend::new(LlmScript::parse(&rec.script().to_json()).unwrap());
        assert_eq!(replay.complete(&LlmRequest::new(LlmRole::Planner, "z")).unwrap().text, "a");
    }
}
