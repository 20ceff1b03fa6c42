//! Listeners watch chat, state updates and clock ticks and annotate events.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use regex::Regex;
use thiserror::Error;

use crate::domain::{
    ActivityStateUpdate, AnnotatedEvent, Assessment, ChatMessage, Payload, Role, SessionId,
    StateKind, Trigger,
};

/// Default capacity of a session's event queue.
pub const EVENT_QUEUE_CAPACITY: usize = 256;

/// Default inactivity preset.
pub const DEFAULT_INACTIVITY_S: u64 = 120;

pub const GREETING_RULES: &str = include_str!("../rules/greeting.rules");
pub const APT_RULES: &str = include_str!("../rules/apt.rules");

const PEERS_PLACEHOLDER: &str = "{peers}";

/// Something a listener can observe.
#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Chat(&'a ChatMessage),
    State {
        update: &'a ActivityStateUpdate,
        log_seq: u64,
    },
    Tick(u64),
}

impl Input<'_> {
    fn trigger(&self) -> Trigger {
        match *self {
            Input::Chat(m) => Trigger::Chat { seq: m.seq },
            Input::State { log_seq, .. } => Trigger::State { log_seq },
            Input::Tick(at) => Trigger::Tick { at },
        }
    }

    fn matches(&self, interests: Interests) -> bool {
        match self {
            Input::Chat(_) => interests.chat,
            Input::State { .. } => interests.state,
            Input::Tick(_) => interests.tick,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Interests {
    pub chat: bool,
    pub state: bool,
    pub tick: bool,
}

impl Interests {
    pub const CHAT: Self = Self {
        chat: true,
        state: false,
        tick: false,
    };
    pub const STATE: Self = Self {
        chat: false,
        state: true,
        tick: false,
    };
}

/// Session facts a listener may consult.
#[derive(Debug, Clone)]
pub struct ListenerContext<'a> {
    pub session: &'a SessionId,
    /// Display names of everyone currently in the room.
    pub participants: &'a [String],
    pub now: u64,
}

/// A listener's raw finding; the dispatcher turns it into an [`AnnotatedEvent`].
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub label: String,
    pub note: String,
    pub confidence: f64,
    pub payload: Payload,
}

impl Detection {
    pub fn certain(label: impl Into<String>, note: impl Into<String>, payload: Payload) -> Self {
        Self {
            label: label.into(),
            note: note.into(),
            confidence: 1.0,
            payload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("listener {listener} failed: {reason}")]
pub struct ListenerError {
    pub listener: String,
    pub reason: String,
}

pub trait Listener: Send {
    fn name(&self) -> &str;
    fn interests(&self) -> Interests;
    fn observe(
        &mut self,
        input: &Input<'_>,
        ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("listener name {0:?} is already registered")]
    DuplicateName(String),
}

/// Listeners of one session, invoked in registration order.
#[derive(Default)]
pub struct ListenerSet {
    listeners: Vec<Box<dyn Listener>>,
    next_event: u64,
}

impl fmt::Debug for ListenerSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.listeners.iter().map(|l| l.name()))
            .finish()
    }
}

/// Result of one dispatch: events in registration order, plus any failures.
#[derive(Debug, Default)]
pub struct Dispatch {
    pub events: Vec<AnnotatedEvent>,
    pub failures: Vec<ListenerError>,
}

impl ListenerSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, listener: Box<dyn Listener>) -> Result<(), RegistryError> {
        if self.listeners.iter().any(|l| l.name() == listener.name()) {
            return Err(RegistryError::DuplicateName(listener.name().to_string()));
        }
        self.listeners.push(listener);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.listeners.iter().map(|l| l.name()).collect()
    }

    /// Runs every interested listener. A failing listener contributes no
    /// events and does not affect the others.
    pub fn dispatch(&mut self, input: &Input<'_>, ctx: &ListenerContext<'_>) -> Dispatch {
        let mut out = Dispatch::default();
        for listener in &mut self.listeners {
            if !input.matches(listener.interests()) {
                continue;
            }
            match listener.observe(input, ctx) {
                Ok(found) => {
                    for d in found {
                        self.next_event += 1;
                        out.events.push(AnnotatedEvent {
                            id: format!("{}:e{}", ctx.session, self.next_event),
                            session: ctx.session.clone(),
                            source_listener: listener.name().to_string(),
                            label: d.label,
                            assessment: Assessment {
                                note: d.note,
                                confidence: d.confidence.clamp(0.0, 1.0),
                            },
                            trigger: input.trigger(),
                            payload: d.payload,
                            created_at: ctx.now,
                        });
                    }
                }
                Err(e) => {
                    tracing::warn!(session = %ctx.session, error = %e, "listener failed");
                    out.failures.push(e);
                }
            }
        }
        out
    }
}

/// FIFO of annotated events; full queues drop their oldest entry.
#[derive(Debug, Clone)]
pub struct EventQueue {
    capacity: usize,
    events: VecDeque<AnnotatedEvent>,
    dropped: u64,
}

impl Default for EventQueue {
    fn default() -> Self {
        Self::with_capacity(EVENT_QUEUE_CAPACITY)
    }
}

impl EventQueue {
    pub fn with_capacity(capacity: usize) -> Self {
        assert!(capacity > 0, "event queue capacity must be positive");
        Self {
            capacity,
            events: VecDeque::with_capacity(capacity),
            dropped: 0,
        }
    }

    /// Enqueues `event`, returning the event evicted to make room, if any.
    pub fn push(&mut self, event: AnnotatedEvent) -> Option<AnnotatedEvent> {
        let evicted = if self.events.len() == self.capacity {
            self.dropped += 1;
            let old = self.events.pop_front();
            if let Some(old) = &old {
                tracing::warn!(event = %old.id, label = %old.label, "event queue full, dropping oldest");
            }
            old
        } else {
            None
        };
        self.events.push_back(event);
        evicted
    }

    pub fn pop(&mut self) -> Option<AnnotatedEvent> {
        self.events.pop_front()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("rule table line {line}: {reason}")]
pub struct RuleError {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
struct Rule {
    label: String,
    source: String,
    compiled: Option<Regex>,
}

/// Ordered `label<TAB>pattern` rules; the first match wins.
#[derive(Debug, Clone, Default)]
pub struct RuleTable {
    rules: Vec<Rule>,
}

impl RuleTable {
    pub fn parse(text: &str) -> Result<Self, RuleError> {
        let mut rules = Vec::new();
        for (index, raw) in text.lines().enumerate() {
            let line = index + 1;
            if raw.trim().is_empty() || raw.trim_start().starts_with('#') {
                continue;
            }
            let (label, pattern) = raw.split_once('\t').ok_or_else(|| RuleError {
                line,
                reason: "expected `label<TAB>pattern`".into(),
            })?;
            let (label, pattern) = (label.trim(), pattern.trim());
            if label.is_empty() || pattern.is_empty() {
                return Err(RuleError {
                    line,
                    reason: "empty label or pattern".into(),
                });
            }
            let peer_scoped = pattern.contains(PEERS_PLACEHOLDER);
            let probe = pattern.replace(PEERS_PLACEHOLDER, "(?P<peer>x)");
            let compiled = Regex::new(&probe).map_err(|e| RuleError {
                line,
                reason: e.to_string(),
            })?;
            rules.push(Rule {
                label: label.to_string(),
                source: pattern.to_string(),
                compiled: (!peer_scoped).then_some(compiled),
            });
        }
        Ok(Self { rules })
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// Label of the first matching rule, plus the matched peer name for
    /// peer-scoped rules.
    pub fn classify(&self, text: &str, peers: &[&str]) -> Option<(String, Option<String>)> {
        for rule in &self.rules {
            match &rule.compiled {
                Some(re) => {
                    if re.is_match(text) {
                        return Some((rule.label.clone(), None));
                    }
                }
                None => {
                    if peers.is_empty() {
                        continue;
                    }
                    let names: Vec<String> = peers.iter().map(|p| regex::escape(p)).collect();
                    let expanded = rule
                        .source
                        .replace(PEERS_PLACEHOLDER, &format!("(?P<peer>{})", names.join("|")));
                    let Ok(re) = Regex::new(&expanded) else {
                        continue;
                    };
                    if let Some(caps) = re.captures(text) {
                        let peer = caps.name("peer").map(|m| m.as_str().to_string());
                        return Some((rule.label.clone(), peer));
                    }
                }
            }
        }
        None
    }
}

fn chat_payload(message: &ChatMessage) -> Payload {
    Payload::from([
        ("sender".to_string(), message.sender.clone()),
        ("name".to_string(), message.sender.clone()),
        ("text".to_string(), message.text.clone()),
        ("seq".to_string(), message.seq.to_string()),
    ])
}

/// Applies a rule table to human chat turns.
#[derive(Debug, Clone)]
pub struct RuleListener {
    name: String,
    table: RuleTable,
}

impl RuleListener {
    pub fn new(name: impl Into<String>, table: RuleTable) -> Self {
        Self {
            name: name.into(),
            table,
        }
    }
}

impl Listener for RuleListener {
    fn name(&self) -> &str {
        &self.name
    }

    fn interests(&self) -> Interests {
        Interests::CHAT
    }

    fn observe(
        &mut self,
        input: &Input<'_>,
        ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError> {
        let Input::Chat(message) = input else {
            return Ok(Vec::new());
        };
        if message.role != Role::Human {
            return Ok(Vec::new());
        }
        let peers: Vec<&str> = ctx
            .participants
            .iter()
            .map(String::as_str)
            .filter(|p| *p != message.sender)
            .collect();
        Ok(self
            .table
            .classify(&message.text, &peers)
            .map(|(label, peer)| {
                let mut payload = chat_payload(message);
                if let Some(peer) = peer {
                    payload.insert("peer".into(), peer);
                }
                Detection::certain(label, format!("rule match by {}", self.name), payload)
            })
            .into_iter()
            .collect())
    }
}

/// Emits a `chat` event for every human turn; LLM agents gate on it.
#[derive(Debug, Clone, Default)]
pub struct TurnListener;

impl Listener for TurnListener {
    fn name(&self) -> &str {
        "turn"
    }

    fn interests(&self) -> Interests {
        Interests::CHAT
    }

    fn observe(
        &mut self,
        input: &Input<'_>,
        _ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError> {
        match input {
            Input::Chat(m) if m.role == Role::Human => Ok(vec![Detection::certain(
                "chat",
                "human turn",
                chat_payload(m),
            )]),
            _ => Ok(Vec::new()),
        }
    }
}

/// Passes presence updates through as `presence_join` / `presence_leave`.
#[derive(Debug, Clone, Default)]
pub struct PresenceListener;

impl Listener for PresenceListener {
    fn name(&self) -> &str {
        "presence"
    }

    fn interests(&self) -> Interests {
        Interests::STATE
    }

    fn observe(
        &mut self,
        input: &Input<'_>,
        _ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError> {
        match input {
            Input::State { update, .. }
                if matches!(
                    update.kind,
                    StateKind::PresenceJoin | StateKind::PresenceLeave
                ) =>
            {
                Ok(vec![Detection::certain(
                    update.kind.as_str(),
                    "presence change",
                    update.payload.clone(),
                )])
            }
            _ => Ok(Vec::new()),
        }
    }
}

/// Passes `subtask_complete` updates through.
#[derive(Debug, Clone, Default)]
pub struct SubtaskListener;

impl Listener for SubtaskListener {
    fn name(&self) -> &str {
        "subtask"
    }

    fn interests(&self) -> Interests {
        Interests::STATE
    }

    fn observe(
        &mut self,
        input: &Input<'_>,
        _ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError> {
        match input {
            Input::State { update, .. } if update.kind == StateKind::SubtaskComplete => {
                Ok(vec![Detection::certain(
                    "subtask_complete",
                    "activity reported completion",
                    update.payload.clone(),
                )])
            }
            _ => Ok(Vec::new()),
        }
    }
}

/// Fires once per silence period of at least `threshold_ms` without a human turn.
#[derive(Debug, Clone)]
pub struct InactivityListener {
    threshold_ms: u64,
    last_human_at: u64,
    fired: bool,
}

impl InactivityListener {
    /// `started_at` is when the silence clock first starts running.
    pub fn new(threshold_s: u64, started_at: u64) -> Self {
        Self {
            threshold_ms: threshold_s * 1000,
            last_human_at: started_at,
            fired: false,
        }
    }

    /// Returns a detection if the session has just crossed the threshold.
    pub fn tick(&mut self, now: u64) -> Option<Detection> {
        let silence = now.saturating_sub(self.last_human_at);
        if self.fired || silence < self.threshold_ms {
            return None;
        }
        self.fired = true;
        Some(Detection::certain(
            "inactivity",
            format!("no human turn for {} s", silence / 1000),
            Payload::from([("silence_s".to_string(), (silence / 1000).to_string())]),
        ))
    }

    pub fn heard(&mut self, at: u64) {
        self.last_human_at = at;
        self.fired = false;
    }
}

impl Listener for InactivityListener {
    fn name(&self) -> &str {
        "inactivity"
    }

    fn interests(&self) -> Interests {
        Interests {
            chat: true,
            state: false,
            tick: true,
        }
    }

    fn observe(
        &mut self,
        input: &Input<'_>,
        _ctx: &ListenerContext<'_>,
    ) -> Result<Vec<Detection>, ListenerError> {
        match *input {
            Input::Chat(m) if m.role == Role::Human => {
                self.heard(m.ts);
                Ok(Vec::new())
            }
            Input::Tick(now) => Ok(self.tick(now).into_iter().collect()),
            _ => Ok(Vec::new()),
        }
    }
}

/// Settings for the built-in listener set.
#[derive(Debug, Clone)]
pub struct ListenerSettings {
    pub greeting: RuleTable,
    pub apt: RuleTable,
    pub inactivity_s: u64,
    pub queue_capacity: usize,
}

impl Default for ListenerSettings {
    fn default() -> Self {
        Self {
            greeting: RuleTable::parse(GREETING_RULES).expect("bundled greeting rules parse"),
            apt: RuleTable::parse(APT_RULES).expect("bundled APT rules parse"),
            inactivity_s: DEFAULT_INACTIVITY_S,
            queue_capacity: EVENT_QUEUE_CAPACITY,
        }
    }
}

impl ListenerSettings {
    /// Builds the standard listener set for a new session.
    pub fn build(&self, started_at: u64) -> ListenerSet {
        let mut set = ListenerSet::new();
        let builtins: Vec<Box<dyn Listener>> = vec![
            Box::new(PresenceListener),
            Box::new(TurnListener),
            Box::new(RuleListener::new("greeting", self.greeting.clone())),
            Box::new(RuleListener::new("apt", self.apt.clone())),
            Box::new(SubtaskListener),
            Box::new(InactivityListener::new(self.inactivity_s, started_at)),
        ];
        for listener in builtins {
            set.register(listener)
                .expect("built-in listener names are unique");
        }
        set
    }
}

/// Distinct labels a set of events carries, in first-seen order.
pub fn labels(events: &[AnnotatedEvent]) -> Vec<&str> {
    let mut seen = HashSet::new();
    events
        .iter()
        .map(|e| e.label.as_str())
        .filter(|l| seen.insert(*l))
        .collect()
}
