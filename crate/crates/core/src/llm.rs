//! LLM agent shell: prompt bundling, chat-completion backends, and the
//! per-agent request slot that keeps one request in flight.

use std::collections::{HashMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use futures::future::BoxFuture;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;
use url::Url;

use crate::coordinator::PASS_SENTINEL;
use crate::domain::ChatMessage;

/// Connection and sampling parameters of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmParams {
    pub provider_url: Url,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub temperature: f64,
    /// How many recent turns go into each request.
    pub context_length: usize,
    pub request_timeout_s: f64,
}

/// Who the agent is and when it speaks.
#[derive(Debug, Clone, PartialEq)]
pub struct PersonaParams {
    pub agent_name: String,
    pub scenario: String,
    pub instructions: String,
    /// Event labels that trigger a request.
    pub interests: Vec<String>,
    pub style: String,
    pub examples: String,
    pub priority: f64,
    pub timeout_s: f64,
    pub decay_rate: f64,
    pub pass_sentinel: String,
}

impl PersonaParams {
    pub const DEFAULT_PRIORITY: f64 = 0.5;
    pub const DEFAULT_TIMEOUT_S: f64 = 45.0;
    pub const DEFAULT_DECAY_RATE: f64 = 0.005;

    pub fn new(agent_name: impl Into<String>, instructions: impl Into<String>) -> Self {
        Self {
            agent_name: agent_name.into(),
            scenario: String::new(),
            instructions: instructions.into(),
            interests: vec!["chat".to_string()],
            style: String::new(),
            examples: String::new(),
            priority: Self::DEFAULT_PRIORITY,
            timeout_s: Self::DEFAULT_TIMEOUT_S,
            decay_rate: Self::DEFAULT_DECAY_RATE,
            pass_sentinel: PASS_SENTINEL.to_string(),
        }
    }

    pub fn is_interested_in(&self, label: &str) -> bool {
        self.interests.iter().any(|i| i == label)
    }
}

/// A configured LLM agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub llm: LlmParams,
    pub persona: PersonaParams,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TranscriptEntry {
    pub speaker: String,
    pub text: String,
}

impl TranscriptEntry {
    pub fn render(&self) -> String {
        format!("{}: {}", self.speaker, self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PromptBundle {
    pub system: String,
    pub transcript: Vec<TranscriptEntry>,
    /// The final transcript entry, if any.
    pub latest: Option<TranscriptEntry>,
}

fn footer(sentinel: &str) -> String {
    format!(
        "You are one participant in a group chat. If you have nothing useful to add right now, \
         reply with exactly {sentinel} and nothing else."
    )
}

/// Bundles persona text and recent turns into a prompt.
///
/// The system text joins scenario, instructions, style and examples, in that
/// order, skipping empty parts, and ends with the pass-sentinel footer.
pub fn build_prompt(persona: &PersonaParams, recent: &[ChatMessage]) -> PromptBundle {
    let mut parts: Vec<String> = [
        &persona.scenario,
        &persona.instructions,
        &persona.style,
        &persona.examples,
    ]
    .into_iter()
    .map(|s| s.trim())
    .filter(|s| !s.is_empty())
    .map(String::from)
    .collect();
    parts.push(footer(&persona.pass_sentinel));
    let transcript: Vec<TranscriptEntry> = recent
        .iter()
        .map(|m| TranscriptEntry {
            speaker: m.sender.clone(),
            text: m.text.clone(),
        })
        .collect();
    PromptBundle {
        system: parts.join("\n\n"),
        latest: transcript.last().cloned(),
        transcript,
    }
}

/// Chat-completions request body for `bundle`.
pub fn request_body(params: &LlmParams, bundle: &PromptBundle) -> Value {
    let mut messages = vec![json!({"role": "system", "content": bundle.system})];
    messages.extend(
        bundle
            .transcript
            .iter()
            .map(|e| json!({"role": "user", "content": e.render()})),
    );
    json!({
        "model": params.model,
        "temperature": params.temperature,
        "messages": messages,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LlmRequest {
    pub agent: String,
    pub params: LlmParams,
    pub bundle: PromptBundle,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LlmError {
    #[error("request timed out after {0} s")]
    Timeout(f64),
    #[error("backend returned HTTP {0}")]
    HttpStatus(u16),
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("environment variable {0} is not set")]
    MissingApiKey(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Completion {
    Text(String),
    Pass,
}

pub trait LlmBackend: Send + Sync {
    /// Returns the raw completion text.
    fn send<'a>(&'a self, request: &'a LlmRequest) -> BoxFuture<'a, Result<String, LlmError>>;
}

/// Sends `request` and maps the pass sentinel to [`Completion::Pass`].
pub async fn complete(
    backend: &dyn LlmBackend,
    request: &LlmRequest,
    pass_sentinel: &str,
) -> Result<Completion, LlmError> {
    let text = backend.send(request).await?;
    let text = text.trim();
    if text == pass_sentinel || text.is_empty() {
        Ok(Completion::Pass)
    } else {
        Ok(Completion::Text(text.to_string()))
    }
}

/// OpenAI-style chat-completions client.
#[derive(Debug, Clone, Default)]
pub struct HttpBackend {
    client: reqwest::Client,
}

impl HttpBackend {
    pub fn new() -> Self {
        Self::default()
    }

    async fn post(&self, request: &LlmRequest) -> Result<String, LlmError> {
        let params = &request.params;
        let key = std::env::var(&params.api_key_env)
            .map_err(|_| LlmError::MissingApiKey(params.api_key_env.clone()))?;
        let timeout = Duration::from_secs_f64(params.request_timeout_s);
        let response = self
            .client
            .post(params.provider_url.clone())
            .bearer_auth(key)
            .timeout(timeout)
            .json(&request_body(params, &request.bundle))
            .send()
            .await
            .map_err(|e| classify(e, params.request_timeout_s))?;
        let status = response.status();
        if !status.is_success() {
            return Err(LlmError::HttpStatus(status.as_u16()));
        }
        let body: Value = response
            .json()
            .await
            .map_err(|e| classify(e, params.request_timeout_s))?;
        body.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(String::from)
            .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))
    }
}

fn classify(e: reqwest::Error, timeout_s: f64) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout(timeout_s)
    } else if e.is_decode() {
        LlmError::MalformedResponse(e.without_url().to_string())
    } else {
        LlmError::Unreachable(e.without_url().to_string())
    }
}

impl LlmBackend for HttpBackend {
    fn send<'a>(&'a self, request: &'a LlmRequest) -> BoxFuture<'a, Result<String, LlmError>> {
        Box::pin(self.post(request))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("mock script line {line}: expected `<agent> | <response>`")]
pub struct ScriptError {
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
enum Scripted {
    Reply(String),
    Fail(LlmError),
}

/// What the mock backend was asked.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturedRequest {
    pub agent: String,
    pub bundle: PromptBundle,
    pub body: Value,
}

/// Deterministic backend replaying a script of per-agent responses.
///
/// Script lines are `<agent> | <response>`, consumed first-in first-out per
/// agent. `!error <status>` and `!timeout` script failures. An exhausted
/// agent answers with the pass sentinel.
#[derive(Debug, Default)]
pub struct MockBackend {
    scripts: Mutex<HashMap<String, VecDeque<Scripted>>>,
    always: Option<LlmError>,
    captured: Mutex<Vec<CapturedRequest>>,
}

impl MockBackend {
    pub fn parse(script: &str) -> Result<Self, ScriptError> {
        let mut scripts: HashMap<String, VecDeque<Scripted>> = HashMap::new();
        for (index, raw) in script.lines().enumerate() {
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (agent, response) = raw.split_once('|').ok_or(ScriptError { line: index + 1 })?;
            let (agent, response) = (agent.trim(), response.trim());
            if agent.is_empty() {
                return Err(ScriptError { line: index + 1 });
            }
            let entry = if response == "!timeout" {
                Scripted::Fail(LlmError::Timeout(0.0))
            } else if let Some(status) = response.strip_prefix("!error") {
                let status = status
                    .trim()
                    .parse()
                    .map_err(|_| ScriptError { line: index + 1 })?;
                Scripted::Fail(LlmError::HttpStatus(status))
            } else {
                Scripted::Reply(response.to_string())
            };
            scripts
                .entry(agent.to_string())
                .or_default()
                .push_back(entry);
        }
        Ok(Self {
            scripts: Mutex::new(scripts),
            ..Self::default()
        })
    }

    /// A backend that fails every call with `error`.
    pub fn failing(error: LlmError) -> Self {
        Self {
            always: Some(error),
            ..Self::default()
        }
    }

    pub fn captured(&self) -> Vec<CapturedRequest> {
        self.captured.lock().expect("capture lock").clone()
    }

    fn next(&self, request: &LlmRequest) -> Result<String, LlmError> {
        self.captured
            .lock()
            .expect("capture lock")
            .push(CapturedRequest {
                agent: request.agent.clone(),
                bundle: request.bundle.clone(),
                body: request_body(&request.params, &request.bundle),
            });
        if let Some(error) = &self.always {
            return Err(error.clone());
        }
        let next = self
            .scripts
            .lock()
            .expect("script lock")
            .get_mut(&request.agent)
            .and_then(VecDeque::pop_front);
        match next {
            Some(Scripted::Reply(text)) => Ok(text),
            Some(Scripted::Fail(e)) => Err(e),
            None => Ok(PASS_SENTINEL.to_string()),
        }
    }
}

impl LlmBackend for MockBackend {
    fn send<'a>(&'a self, request: &'a LlmRequest) -> BoxFuture<'a, Result<String, LlmError>> {
        Box::pin(std::future::ready(self.next(request)))
    }
}

/// One-in-flight bookkeeping for an (agent, session) pair.
///
/// Triggers arriving while a request is outstanding are coalesced: when the
/// request finishes, its result is discarded and a single new request is
/// issued for the newest trigger, with fresh context.
#[derive(Debug, Clone, Default)]
pub struct RequestSlot {
    in_flight: Option<u64>,
    pending: Option<String>,
    issued: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finish {
    /// Use the result.
    Deliver,
    /// Drop the result and issue `request` for the newest trigger.
    Superseded { request: u64, event: String },
    /// Not the outstanding request; ignore it.
    Stale,
}

impl RequestSlot {
    pub fn in_flight(&self) -> bool {
        self.in_flight.is_some()
    }

    /// Returns the request number to issue now, or `None` if coalesced.
    pub fn trigger(&mut self, event: &str) -> Option<u64> {
        if self.in_flight.is_some() {
            self.pending = Some(event.to_string());
            return None;
        }
        Some(self.issue())
    }

    fn issue(&mut self) -> u64 {
        self.issued += 1;
        self.in_flight = Some(self.issued);
        self.issued
    }

    pub fn finish(&mut self, request: u64) -> Finish {
        if self.in_flight != Some(request) {
            return Finish::Stale;
        }
        self.in_flight = None;
        match self.pending.take() {
            Some(event) => Finish::Superseded {
                request: self.issue(),
                event,
            },
            None => Finish::Deliver,
        }
    }
}
