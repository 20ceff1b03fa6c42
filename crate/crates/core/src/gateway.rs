//! Rooms and frame routing, independent of the transport.
//!
//! A [`Room`] owns one session's engine and its members. Every call returns
//! the frames to deliver, in order; the transport must deliver them in that
//! order to keep every member's view identical. [`Hub`] adds the
//! connection-to-room bookkeeping used by the replay harness.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use crate::domain::{DomainError, ParticipantId, ParticipantIds, Payload, SessionId, StateKind};
use crate::engine::{EngineError, LlmJob, PipelineConfig, SessionEngine, Step};
use crate::history::HistoryStore;
use crate::llm::{Completion, LlmError};
use crate::scalar::Scalar;
use crate::wire::{ClientFrame, ErrorCode, PresenceEvent, ServerFrame};

pub type ConnId = u64;

/// Longest accepted display name, in characters.
pub const MAX_NAME_CHARS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    All,
    Only(ConnId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub target: Target,
    pub frame: ServerFrame,
}

/// What a room call produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub deliveries: Vec<Delivery>,
    pub jobs: Vec<LlmJob>,
}

impl Outcome {
    fn error(conn: ConnId, code: ErrorCode, detail: impl Into<String>) -> Self {
        Self {
            deliveries: vec![Delivery {
                target: Target::Only(conn),
                frame: ServerFrame::error(code, detail),
            }],
            jobs: Vec::new(),
        }
    }

    fn push_step(&mut self, step: Step) {
        self.deliveries
            .extend(step.frames.into_iter().map(|frame| Delivery {
                target: Target::All,
                frame,
            }));
        self.jobs.extend(step.jobs);
    }

    fn from_step(step: Step) -> Self {
        let mut out = Self::default();
        out.push_step(step);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Member {
    pub conn: ConnId,
    pub participant: ParticipantId,
    pub name: String,
}

fn domain_error(conn: ConnId, e: DomainError) -> Outcome {
    let code = match e {
        DomainError::EmptyMessage => ErrorCode::EmptyMessage,
        DomainError::TooLong(_) => ErrorCode::TooLong,
        DomainError::BadSessionId(_) => ErrorCode::BadSession,
        DomainError::MalformedUpdate { .. } | DomainError::UnknownStateKind(_) => {
            ErrorCode::MalformedUpdate
        }
    };
    Outcome::error(conn, code, e.to_string())
}

pub struct Room<S> {
    engine: SessionEngine<S>,
    members: Vec<Member>,
    ids: ParticipantIds,
}

impl<S: Scalar> Room<S> {
    pub fn new(
        session: SessionId,
        config: Arc<PipelineConfig>,
        history: Arc<HistoryStore>,
        ids: ParticipantIds,
        now: u64,
    ) -> Result<Self, EngineError> {
        Ok(Self {
            engine: SessionEngine::new(session, config, history, now)?,
            members: Vec::new(),
            ids,
        })
    }

    pub fn session(&self) -> &SessionId {
        self.engine.session()
    }

    pub fn engine(&self) -> &SessionEngine<S> {
        &self.engine
    }

    pub fn members(&self) -> &[Member] {
        &self.members
    }

    pub fn member(&self, conn: ConnId) -> Option<&Member> {
        self.members.iter().find(|m| m.conn == conn)
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Connections a delivery goes to, given the current membership.
    pub fn recipients(&self, target: Target) -> Vec<ConnId> {
        match target {
            Target::All => self.members.iter().map(|m| m.conn).collect(),
            Target::Only(conn) => vec![conn],
        }
    }

    pub fn join(&mut self, conn: ConnId, name: &str, now: u64) -> Outcome {
        let name = name.trim();
        if name.is_empty() {
            return Outcome::error(conn, ErrorCode::BadName, "name must not be empty");
        }
        if name.chars().count() > MAX_NAME_CHARS {
            return Outcome::error(
                conn,
                ErrorCode::BadName,
                format!("name is longer than {MAX_NAME_CHARS} characters"),
            );
        }
        if self.member(conn).is_some() {
            return Outcome::error(
                conn,
                ErrorCode::DuplicateJoin,
                "connection has already joined",
            );
        }
        let participant = self.ids.allocate();
        let history = self.engine.history().messages(self.session());
        let mut out = Outcome::default();
        out.deliveries.push(Delivery {
            target: Target::Only(conn),
            frame: ServerFrame::welcome(participant.as_str(), &history),
        });
        tracing::info!(session = %self.session(), participant = %participant.as_str(), name, "joined");
        self.members.push(Member {
            conn,
            participant,
            name: name.to_string(),
        });
        out.push_step(self.engine.on_presence(PresenceEvent::Join, name, now));
        out
    }

    pub fn chat(&mut self, conn: ConnId, text: &str, now: u64) -> Outcome {
        let Some(member) = self.member(conn) else {
            return Outcome::error(conn, ErrorCode::NotJoined, "join a session first");
        };
        let name = member.name.clone();
        match self.engine.on_chat(&name, text, now) {
            Ok(step) => Outcome::from_step(step),
            Err(e) => domain_error(conn, e),
        }
    }

    pub fn state(&mut self, conn: ConnId, kind: &str, payload: Payload, now: u64) -> Outcome {
        if self.member(conn).is_none() {
            return Outcome::error(conn, ErrorCode::NotJoined, "join a session first");
        }
        let kind = match kind.parse::<StateKind>() {
            Ok(StateKind::PresenceJoin | StateKind::PresenceLeave) => {
                return Outcome::error(
                    conn,
                    ErrorCode::MalformedUpdate,
                    "presence updates are generated by the server",
                )
            }
            Ok(kind) => kind,
            Err(e) => return domain_error(conn, e),
        };
        match self.engine.on_state(kind, payload, now) {
            Ok(step) => Outcome::from_step(step),
            Err(e) => domain_error(conn, e),
        }
    }

    /// Removes a member; the leave is announced to whoever remains.
    pub fn leave(&mut self, conn: ConnId, now: u64) -> Outcome {
        let Some(index) = self.members.iter().position(|m| m.conn == conn) else {
            return Outcome::default();
        };
        let member = self.members.remove(index);
        tracing::info!(session = %self.session(), participant = %member.participant.as_str(), "left");
        Outcome::from_step(
            self.engine
                .on_presence(PresenceEvent::Leave, &member.name, now),
        )
    }

    pub fn tick(&mut self, now: u64) -> Outcome {
        Outcome::from_step(self.engine.on_tick(now))
    }

    pub fn completion(
        &mut self,
        job: &LlmJob,
        result: Result<Completion, LlmError>,
        now: u64,
    ) -> Outcome {
        Outcome::from_step(self.engine.on_completion(job, result, now))
    }
}

/// One frame addressed to one connection.
#[derive(Debug, Clone, PartialEq)]
pub struct Routed {
    pub conn: ConnId,
    pub frame: ServerFrame,
}

/// All rooms of a server plus which connection sits in which room.
pub struct Hub<S> {
    config: Arc<PipelineConfig>,
    history: Arc<HistoryStore>,
    ids: ParticipantIds,
    rooms: BTreeMap<SessionId, Room<S>>,
    joined: HashMap<ConnId, SessionId>,
}

/// Routed frames plus LLM work from one hub call.
#[derive(Debug, Default)]
pub struct HubOutput {
    pub frames: Vec<Routed>,
    pub jobs: Vec<LlmJob>,
}

impl<S: Scalar> Hub<S> {
    pub fn new(config: Arc<PipelineConfig>, history: Arc<HistoryStore>) -> Self {
        Self {
            config,
            history,
            ids: ParticipantIds::new(),
            rooms: BTreeMap::new(),
            joined: HashMap::new(),
        }
    }

    pub fn history(&self) -> &Arc<HistoryStore> {
        &self.history
    }

    pub fn room(&self, session: &SessionId) -> Option<&Room<S>> {
        self.rooms.get(session)
    }

    fn route(room: &Room<S>, outcome: Outcome, out: &mut HubOutput) {
        for d in outcome.deliveries {
            for conn in room.recipients(d.target) {
                out.frames.push(Routed {
                    conn,
                    frame: d.frame.clone(),
                });
            }
        }
        out.jobs.extend(outcome.jobs);
    }

    fn reply(conn: ConnId, frame: ServerFrame) -> HubOutput {
        HubOutput {
            frames: vec![Routed { conn, frame }],
            jobs: Vec::new(),
        }
    }

    pub fn handle(&mut self, conn: ConnId, frame: ClientFrame, now: u64) -> HubOutput {
        let mut out = HubOutput::default();
        match frame {
            ClientFrame::Join { session, name } => {
                if self.joined.contains_key(&conn) {
                    return Self::reply(
                        conn,
                        ServerFrame::error(
                            ErrorCode::DuplicateJoin,
                            "connection has already joined",
                        ),
                    );
                }
                let session = match SessionId::new(session) {
                    Ok(s) => s,
                    Err(e) => {
                        return Self::reply(
                            conn,
                            ServerFrame::error(ErrorCode::BadSession, e.to_string()),
                        )
                    }
                };
                if !self.rooms.contains_key(&session) {
                    let room = Room::new(
                        session.clone(),
                        self.config.clone(),
                        self.history.clone(),
                        self.ids.clone(),
                        now,
                    );
                    match room {
                        Ok(room) => {
                            self.rooms.insert(session.clone(), room);
                        }
                        Err(e) => {
                            tracing::error!(%session, error = %e, "cannot open room");
                            return Self::reply(
                                conn,
                                ServerFrame::error(ErrorCode::BadSession, e.to_string()),
                            );
                        }
                    }
                }
                let room = self.rooms.get_mut(&session).expect("room exists");
                let outcome = room.join(conn, &name, now);
                if room.member(conn).is_some() {
                    self.joined.insert(conn, session);
                }
                Self::route(room, outcome, &mut out);
            }
            ClientFrame::Chat { text } => match self.joined_room(conn) {
                Some(room) => {
                    let outcome = room.chat(conn, &text, now);
                    Self::route(room, outcome, &mut out);
                }
                None => return Self::not_joined(conn),
            },
            ClientFrame::State { kind, payload } => match self.joined_room(conn) {
                Some(room) => {
                    let outcome = room.state(conn, &kind, payload, now);
                    Self::route(room, outcome, &mut out);
                }
                None => return Self::not_joined(conn),
            },
        }
        out
    }

    fn not_joined(conn: ConnId) -> HubOutput {
        Self::reply(
            conn,
            ServerFrame::error(ErrorCode::NotJoined, "join a session first"),
        )
    }

    fn joined_room(&mut self, conn: ConnId) -> Option<&mut Room<S>> {
        let session = self.joined.get(&conn)?;
        self.rooms.get_mut(session)
    }

    pub fn disconnect(&mut self, conn: ConnId, now: u64) -> HubOutput {
        let mut out = HubOutput::default();
        if let Some(session) = self.joined.remove(&conn) {
            if let Some(room) = self.rooms.get_mut(&session) {
                let outcome = room.leave(conn, now);
                Self::route(room, outcome, &mut out);
            }
        }
        out
    }

    /// Ticks every room, in session-id order.
    pub fn tick(&mut self, now: u64) -> HubOutput {
        let mut out = HubOutput::default();
        for room in self.rooms.values_mut() {
            let outcome = room.tick(now);
            Self::route(room, outcome, &mut out);
        }
        out
    }

    pub fn completion(
        &mut self,
        job: &LlmJob,
        result: Result<Completion, LlmError>,
        now: u64,
    ) -> HubOutput {
        let mut out = HubOutput::default();
        if let Some(room) = self.rooms.get_mut(&job.session) {
            let outcome = room.completion(job, result, now);
            Self::route(room, outcome, &mut out);
        }
        out
    }
}
