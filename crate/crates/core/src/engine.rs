//! The per-session pipeline: listeners feed an event queue, actors and the
//! plan turn events into proposals, LLM agents are asked for completions, and
//! the coordinator picks what the room sees.
//!
//! The engine does no I/O besides the history store. LLM calls are returned
//! as [`LlmJob`]s; the caller runs them and reports back through
//! [`SessionEngine::on_completion`].

use std::sync::Arc;

use thiserror::Error;

use crate::actors::{ActorSet, DuplicateActor, ProposalDraft};
use crate::config::ServerConfig;
use crate::coordinator::{Coordinator, CoordinatorSettings};
use crate::domain::{
    validate_chat_text, Action, ActivityStateUpdate, ChatMessage, DomainError, OutboundAction,
    Payload, Proposal, Role, SessionId, StateKind,
};
use crate::history::{HistoryStore, NewMessage};
use crate::listeners::{EventQueue, Input, ListenerContext, ListenerSet, ListenerSettings};
use crate::llm::{
    build_prompt, complete, AgentSpec, Completion, LlmBackend, LlmError, LlmRequest, RequestSlot,
};
use crate::plan::{Plan, PlanError, PlanRun};
use crate::scalar::Scalar;
use crate::wire::{PresenceEvent, ServerFrame};

/// Source actor name of plan proposals.
pub const PLAN_ACTOR: &str = "plan";

/// Everything a session needs, shared by all sessions of a server.
#[derive(Debug, Clone, Default)]
pub struct PipelineConfig {
    pub server: ServerConfig,
    pub agents: Vec<AgentSpec>,
    pub plan: Option<Plan>,
}

impl PipelineConfig {
    pub fn coordinator_settings<S: Scalar>(&self) -> CoordinatorSettings<S> {
        CoordinatorSettings {
            cooldown_s: S::from_config(self.server.cooldown_s),
            tick_interval_ms: self.server.tick_interval_ms,
            emit_floor: S::from_config(self.server.emit_floor),
            pass_sentinel: self.server.pass_sentinel.clone(),
        }
    }

    pub fn listener_settings(&self) -> ListenerSettings {
        ListenerSettings {
            greeting: self.server.greeting_rules.clone(),
            apt: self.server.apt_rules.clone(),
            inactivity_s: self.server.inactivity_s,
            queue_capacity: self.server.queue_capacity,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Actor(#[from] DuplicateActor),
}

/// An LLM request the caller must run.
#[derive(Debug, Clone, PartialEq)]
pub struct LlmJob {
    pub session: SessionId,
    /// Index into [`PipelineConfig::agents`].
    pub agent: usize,
    pub request_id: u64,
    /// The event being answered.
    pub event: String,
    pub request: LlmRequest,
    pub pass_sentinel: String,
}

impl LlmJob {
    pub async fn run(&self, backend: &dyn LlmBackend) -> Result<Completion, LlmError> {
        complete(backend, &self.request, &self.pass_sentinel).await
    }
}

/// Frames to broadcast to the whole room, in order, and LLM work to start.
#[derive(Debug, Default)]
pub struct Step {
    pub frames: Vec<ServerFrame>,
    pub jobs: Vec<LlmJob>,
}

impl Step {
    pub fn extend(&mut self, other: Step) {
        self.frames.extend(other.frames);
        self.jobs.extend(other.jobs);
    }
}

pub struct SessionEngine<S> {
    session: SessionId,
    config: Arc<PipelineConfig>,
    history: Arc<HistoryStore>,
    listeners: ListenerSet,
    queue: EventQueue,
    actors: ActorSet<S>,
    coordinator: Coordinator<S>,
    plan: Option<PlanRun>,
    slots: Vec<RequestSlot>,
    participants: Vec<String>,
    next_proposal: u64,
    log_failures: u64,
}

impl<S: Scalar> SessionEngine<S> {
    pub fn new(
        session: SessionId,
        config: Arc<PipelineConfig>,
        history: Arc<HistoryStore>,
        now: u64,
    ) -> Result<Self, EngineError> {
        let listener_settings = config.listener_settings();
        let plan = config
            .plan
            .clone()
            .map(|p| PlanRun::start(p, now))
            .transpose()?;
        history.open(&session);
        Ok(Self {
            listeners: listener_settings.build(now),
            queue: EventQueue::with_capacity(listener_settings.queue_capacity),
            actors: ActorSet::from_specs(&config.server.actors)?,
            coordinator: Coordinator::new(config.coordinator_settings()),
            plan,
            slots: vec![RequestSlot::default(); config.agents.len()],
            participants: Vec::new(),
            next_proposal: 0,
            log_failures: 0,
            session,
            config,
            history,
        })
    }

    pub fn session(&self) -> &SessionId {
        &self.session
    }

    pub fn history(&self) -> &Arc<HistoryStore> {
        &self.history
    }

    pub fn coordinator(&self) -> &Coordinator<S> {
        &self.coordinator
    }

    pub fn plan(&self) -> Option<&PlanRun> {
        self.plan.as_ref()
    }

    /// Display names of participants currently present.
    pub fn participants(&self) -> &[String] {
        &self.participants
    }

    /// Number of session-log writes that failed.
    pub fn log_failures(&self) -> u64 {
        self.log_failures
    }

    pub fn on_chat(&mut self, sender: &str, text: &str, now: u64) -> Result<Step, DomainError> {
        let text = validate_chat_text(text)?;
        let mut step = Step::default();
        let message = self.append(sender, Role::Human, text, now);
        step.frames.push(ServerFrame::chat(&message));
        self.observe(&Input::Chat(&message), now, &mut step);
        Ok(step)
    }

    pub fn on_state(
        &mut self,
        kind: StateKind,
        payload: Payload,
        now: u64,
    ) -> Result<Step, DomainError> {
        let update = ActivityStateUpdate {
            session: self.session.clone(),
            kind,
            payload,
            ts: now,
        };
        update.validate()?;
        let mut step = Step::default();
        self.record_state(&update, now, &mut step);
        Ok(step)
    }

    pub fn on_presence(&mut self, event: PresenceEvent, name: &str, now: u64) -> Step {
        let kind = match event {
            PresenceEvent::Join => {
                self.participants.push(name.to_string());
                StateKind::PresenceJoin
            }
            PresenceEvent::Leave => {
                if let Some(i) = self.participants.iter().position(|p| p == name) {
                    self.participants.remove(i);
                }
                StateKind::PresenceLeave
            }
        };
        let mut step = Step::default();
        step.frames.push(ServerFrame::Presence {
            event,
            name: name.to_string(),
            ts: now,
        });
        let update = ActivityStateUpdate {
            session: self.session.clone(),
            kind,
            payload: Payload::from([("name".to_string(), name.to_string())]),
            ts: now,
        };
        self.record_state(&update, now, &mut step);
        step
    }

    /// One arbitration tick: timers, due plan stages, then at most one emission.
    pub fn on_tick(&mut self, now: u64) -> Step {
        let mut step = Step::default();
        self.observe(&Input::Tick(now), now, &mut step);
        if let Some(plan) = &mut self.plan {
            let emissions = plan.on_tick::<S>(now);
            for e in emissions {
                self.submit(PLAN_ACTOR, e.draft, &e.key, now);
            }
        }
        if let Some(winner) = self.coordinator.tick(now) {
            self.emit(winner, now, &mut step);
        }
        step
    }

    /// Handles the result of a job returned earlier by this engine.
    pub fn on_completion(
        &mut self,
        job: &LlmJob,
        result: Result<Completion, LlmError>,
        now: u64,
    ) -> Step {
        let mut step = Step::default();
        let Some(slot) = self.slots.get_mut(job.agent) else {
            return step;
        };
        let agent = &self.config.agents[job.agent].persona;
        match slot.finish(job.request_id) {
            crate::llm::Finish::Stale => {}
            crate::llm::Finish::Superseded { request, event } => {
                tracing::debug!(agent = %agent.agent_name, "completion superseded by a newer turn");
                step.jobs.push(self.job(job.agent, request, event));
            }
            crate::llm::Finish::Deliver => match result {
                Ok(Completion::Text(text)) => {
                    let draft = ProposalDraft {
                        action: Action::Say {
                            author: agent.agent_name.clone(),
                            text,
                        },
                        priority: S::from_config(agent.priority),
                        timeout_s: S::from_config(agent.timeout_s),
                        decay_rate: S::from_config(agent.decay_rate),
                    };
                    let name = agent.agent_name.clone();
                    self.submit(&name, draft, &job.event, now);
                }
                Ok(Completion::Pass) => {
                    tracing::debug!(agent = %agent.agent_name, event = %job.event, "agent passed");
                }
                Err(error) => {
                    tracing::warn!(agent = %agent.agent_name, event = %job.event, %error, "completion failed");
                }
            },
        }
        step
    }

    fn append(&mut self, sender: &str, role: Role, text: String, now: u64) -> ChatMessage {
        let new = NewMessage {
            session: self.session.clone(),
            sender: sender.to_string(),
            role,
            text,
            ts: now,
        };
        match self.history.append(new) {
            Ok(message) => message,
            Err((message, error)) => {
                self.log_failures += 1;
                tracing::error!(session = %self.session, %error, "session log write failed");
                message
            }
        }
    }

    fn record_state(&mut self, update: &ActivityStateUpdate, now: u64, step: &mut Step) {
        let log_seq = match self.history.log_state(update) {
            Ok(seq) => seq,
            Err((seq, error)) => {
                self.log_failures += 1;
                tracing::error!(session = %self.session, %error, "session log write failed");
                seq
            }
        };
        self.observe(&Input::State { update, log_seq }, now, step);
    }

    fn observe(&mut self, input: &Input<'_>, now: u64, step: &mut Step) {
        let ctx = ListenerContext {
            session: &self.session,
            participants: &self.participants,
            now,
        };
        let dispatch = self.listeners.dispatch(input, &ctx);
        for event in dispatch.events {
            self.queue.push(event);
        }
        self.drain(now, step);
    }

    fn drain(&mut self, now: u64, step: &mut Step) {
        while let Some(event) = self.queue.pop() {
            tracing::debug!(event = %event.id, label = %event.label, "event");
            for offer in self.actors.consume(&event) {
                self.submit(&offer.source_actor, offer.draft, &event.id, now);
            }
            if let Some(plan) = &mut self.plan {
                let emissions = plan.on_event::<S>(&event);
                for e in emissions {
                    self.submit(PLAN_ACTOR, e.draft, &e.key, now);
                }
            }
            for agent in 0..self.config.agents.len() {
                if !self.config.agents[agent]
                    .persona
                    .is_interested_in(&event.label)
                {
                    continue;
                }
                if let Some(request) = self.slots[agent].trigger(&event.id) {
                    step.jobs.push(self.job(agent, request, event.id.clone()));
                }
            }
        }
    }

    fn job(&self, agent: usize, request_id: u64, event: String) -> LlmJob {
        let spec = &self.config.agents[agent];
        let recent = self.history.last_n(&self.session, spec.llm.context_length);
        LlmJob {
            session: self.session.clone(),
            agent,
            request_id,
            event,
            request: LlmRequest {
                agent: spec.persona.agent_name.clone(),
                params: spec.llm.clone(),
                bundle: build_prompt(&spec.persona, &recent),
            },
            pass_sentinel: spec.persona.pass_sentinel.clone(),
        }
    }

    fn submit(&mut self, actor: &str, draft: ProposalDraft<S>, in_response_to: &str, now: u64) {
        self.next_proposal += 1;
        let id = format!("{}:p{}", self.session, self.next_proposal);
        let proposal = draft.into_proposal(id, &self.session, actor, in_response_to, now);
        let id = proposal.id.clone();
        if let Err(reason) = self.coordinator.submit(proposal) {
            tracing::debug!(proposal = %id, actor, %reason, "proposal rejected");
        }
    }

    fn emit(&mut self, winner: Proposal<S>, now: u64, step: &mut Step) {
        tracing::debug!(proposal = %winner.id, actor = %winner.source_actor, "emitting");
        match winner.action {
            Action::Say { author, text } => {
                let message = self.append(&author, Role::Agent, text, now);
                step.frames.push(ServerFrame::chat(&message));
                self.observe(&Input::Chat(&message), now, step);
            }
            Action::Command { name, payload } => {
                let action = OutboundAction {
                    session: self.session.clone(),
                    action: Action::Command {
                        name: name.clone(),
                        payload: payload.clone(),
                    },
                    emitted_seq: 0,
                };
                if let Err((_, error)) = self.history.log_action(action, now) {
                    self.log_failures += 1;
                    tracing::error!(session = %self.session, %error, "session log write failed");
                }
                step.frames.push(ServerFrame::Command {
                    name,
                    payload,
                    ts: now,
                });
            }
        }
    }
}
