//! Shared vocabulary: sessions, participants, messages, events, proposals.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Longest accepted chat message, in characters.
pub const MAX_CHAT_CHARS: usize = 4000;

const MAX_SESSION_ID_LEN: usize = 64;

/// String-to-string map carried by state updates, events and commands.
pub type Payload = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("message is empty")]
    EmptyMessage,
    #[error("message is {0} characters, limit is {MAX_CHAT_CHARS}")]
    TooLong(usize),
    #[error("invalid session id {0:?}")]
    BadSessionId(String),
    #[error("state update of kind {kind} is missing payload key {key:?}")]
    MalformedUpdate { kind: StateKind, key: &'static str },
    #[error("unknown state kind {0:?}")]
    UnknownStateKind(String),
}

/// Trims trailing whitespace and enforces the length cap.
pub fn validate_chat_text(text: &str) -> Result<String, DomainError> {
    let trimmed = text.trim_end();
    if trimmed.trim_start().is_empty() {
        return Err(DomainError::EmptyMessage);
    }
    let chars = trimmed.chars().count();
    if chars > MAX_CHAT_CHARS {
        return Err(DomainError::TooLong(chars));
    }
    Ok(trimmed.to_string())
}

/// Identifier of one activity session (and its room).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SessionId(String);

impl SessionId {
    pub fn new(value: impl Into<String>) -> Result<Self, DomainError> {
        let value = value.into();
        let url_safe = value
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '~'));
        if value.is_empty()
            || value.len() > MAX_SESSION_ID_LEN
            || !url_safe
            || value == "."
            || value == ".."
        {
            return Err(DomainError::BadSessionId(value));
        }
        Ok(Self(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for SessionId {
    type Error = DomainError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<SessionId> for String {
    fn from(id: SessionId) -> Self {
        id.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParticipantId(String);

impl ParticipantId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Hands out participant ids that are never reused within one server run.
#[derive(Debug, Clone, Default)]
pub struct ParticipantIds {
    next: Arc<AtomicU64>,
}

impl ParticipantIds {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocate(&self) -> ParticipantId {
        let n = self.next.fetch_add(1, Ordering::Relaxed) + 1;
        ParticipantId(format!("p{n}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Human,
    Agent,
    System,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Human => "human",
            Role::Agent => "agent",
            Role::System => "system",
        })
    }
}

/// One sequenced turn in a session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub session: SessionId,
    pub seq: u64,
    pub sender: String,
    pub role: Role,
    pub text: String,
    pub ts: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateKind {
    PresenceJoin,
    PresenceLeave,
    SubtaskComplete,
    Custom,
}

impl StateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StateKind::PresenceJoin => "presence_join",
            StateKind::PresenceLeave => "presence_leave",
            StateKind::SubtaskComplete => "subtask_complete",
            StateKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for StateKind {
    type Err = DomainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "presence_join" => Ok(StateKind::PresenceJoin),
            "presence_leave" => Ok(StateKind::PresenceLeave),
            "subtask_complete" => Ok(StateKind::SubtaskComplete),
            "custom" => Ok(StateKind::Custom),
            other => Err(DomainError::UnknownStateKind(other.to_string())),
        }
    }
}

impl fmt::Display for StateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityStateUpdate {
    pub session: SessionId,
    pub kind: StateKind,
    pub payload: Payload,
    pub ts: u64,
}

impl ActivityStateUpdate {
    pub fn validate(&self) -> Result<(), DomainError> {
        if self.kind == StateKind::SubtaskComplete && !self.payload.contains_key("task") {
            return Err(DomainError::MalformedUpdate {
                kind: self.kind,
                key: "task",
            });
        }
        Ok(())
    }
}

/// A listener's note about an event, with its confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assessment {
    pub note: String,
    pub confidence: f64,
}

/// What an annotated event was detected on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "on", rename_all = "snake_case")]
pub enum Trigger {
    /// A chat message, by its seq.
    Chat { seq: u64 },
    /// A state update, by its session log seq.
    State { log_seq: u64 },
    /// A clock tick at the given time.
    Tick { at: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedEvent {
    pub id: String,
    pub session: SessionId,
    pub source_listener: String,
    pub label: String,
    pub assessment: Assessment,
    pub trigger: Trigger,
    /// Values available to response templates (`name`, `sender`, `task`, ...).
    pub payload: Payload,
    pub created_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Action {
    Say { author: String, text: String },
    Command { name: String, payload: Payload },
}

impl Action {
    pub fn is_say(&self) -> bool {
        matches!(self, Action::Say { .. })
    }
}

/// A candidate action competing for the output coordinator.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal<S> {
    pub id: String,
    pub session: SessionId,
    pub source_actor: String,
    pub action: Action,
    pub priority: S,
    pub timeout_s: S,
    pub decay_rate: S,
    pub submitted_at: u64,
    pub in_response_to: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InvalidProposal {
    #[error("priority outside [0, 1]")]
    Priority,
    #[error("timeout must be positive")]
    Timeout,
    #[error("decay rate must be non-negative")]
    DecayRate,
    #[error("say text is empty")]
    EmptySay,
}

impl<S: Scalar> Proposal<S> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), InvalidProposal> {
        if !self.priority.is_unit_interval() {
            return Err(InvalidProposal::Priority);
        }
        if !(self.timeout_s > S::zero()) {
            return Err(InvalidProposal::Timeout);
        }
        if !(self.decay_rate >= S::zero()) {
            return Err(InvalidProposal::DecayRate);
        }
        if let Action::Say { text, .. } = &self.action {
            if text.trim().is_empty() {
                return Err(InvalidProposal::EmptySay);
            }
        }
        Ok(())
    }
}

/// An action that left the coordinator (or plan) and was delivered to a room.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutboundAction {
    pub session: SessionId,
    pub action: Action,
    pub emitted_seq: u64,
}

/// Millisecond time source.
pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0)
    }
}

/// Manually advanced clock shared between clones.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start_ms)),
        }
    }

    pub fn set(&self, ms: u64) {
        self.now.store(ms, Ordering::SeqCst);
    }

    pub fn advance(&self, ms: u64) -> u64 {
        self.now.fetch_add(ms, Ordering::SeqCst) + ms
    }
}

impl Clock for VirtualClock {
    fn now_ms(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chat_text_trailing_whitespace_is_trimmed() {
        assert_eq!(validate_chat_text("hello ").unwrap(), "hello");
        assert_eq!(validate_chat_text("  indented\n").unwrap(), "  indented");
    }

    #[test]
    fn chat_text_empty_rejected() {
        assert_eq!(validate_chat_text(""), Err(DomainError::EmptyMessage));
        assert_eq!(validate_chat_text(" \t\n"), Err(DomainError::EmptyMessage));
    }

    #[test]
    fn chat_text_length_boundary() {
        let ok = "a".repeat(4000);
        assert_eq!(validate_chat_text(&ok).unwrap().len(), 4000);
        let long = "a".repeat(4001);
        assert_eq!(validate_chat_text(&long), Err(DomainError::TooLong(4001)));
        // counted in characters, not bytes
        let wide = "é".repeat(4000);
        assert!(validate_chat_text(&wide).is_ok());
    }

    #[test]
    fn session_ids() {
        assert!(SessionId::new("s1").is_ok());
        assert!(SessionId::new("room_2.b-~").is_ok());
        assert!(SessionId::new("").is_err());
        assert!(SessionId::new("a/b").is_err());
        assert!(SessionId::new("..").is_err());
        assert!(SessionId::new("x".repeat(65)).is_err());
        let parsed: Result<SessionId, _> = serde_json::from_str("\"has space\"");
        assert!(parsed.is_err());
    }

    #[test]
    fn participant_ids_never_repeat() {
        let ids = ParticipantIds::new();
        let other = ids.clone();
        let a = ids.allocate();
        let b = other.allocate();
        assert_ne!(a, b);
        assert_eq!(a.as_str(), "p1");
    }

    #[test]
    fn subtask_complete_requires_task() {
        let mut update = ActivityStateUpdate {
            session: SessionId::new("s").unwrap(),
            kind: StateKind::SubtaskComplete,
            payload: Payload::new(),
            ts: 0,
        };
        assert!(matches!(
            update.validate(),
            Err(DomainError::MalformedUpdate { key: "task", .. })
        ));
        update.payload.insert("task".into(), "3".into());
        assert!(update.validate().is_ok());
    }

    #[test]
    fn proposal_validation() {
        let mut p = Proposal {
            id: "p".into(),
            session: SessionId::new("s").unwrap(),
            source_actor: "a".into(),
            action: Action::Say {
                author: "Bot".into(),
                text: "hi".into(),
            },
            priority: 0.5,
            timeout_s: 1.0,
            decay_rate: 0.0,
            submitted_at: 0,
            in_response_to: "e".into(),
        };
        assert!(p.validate().is_ok());
        p.priority = 1.3;
        assert_eq!(p.validate(), Err(InvalidProposal::Priority));
        p.priority = 0.5;
        p.timeout_s = 0.0;
        assert_eq!(p.validate(), Err(InvalidProposal::Timeout));
        p.timeout_s = 1.0;
        p.action = Action::Say {
            author: "Bot".into(),
            text: " ".into(),
        };
        assert_eq!(p.validate(), Err(InvalidProposal::EmptySay));
    }

    #[test]
    fn virtual_clock_is_shared() {
        let clock = VirtualClock::new(10);
        let view = clock.clone();
        clock.advance(240);
        assert_eq!(view.now_ms(), 250);
        view.set(0);
        assert_eq!(clock.now_ms(), 0);
    }
}
