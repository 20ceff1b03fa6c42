//! Actors turn annotated events into proposals for the output coordinator.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::domain::{Action, AnnotatedEvent, Payload, Proposal};
use crate::scalar::Scalar;

/// Author label used for templated and plan speech.
pub const DEFAULT_AUTHOR: &str = "Bot";

/// Proposal contents before the engine stamps ids and times.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalDraft<S> {
    pub action: Action,
    pub priority: S,
    pub timeout_s: S,
    pub decay_rate: S,
}

impl<S: Scalar> ProposalDraft<S> {
    /// Completes the draft into a proposal answering `in_response_to`.
    pub fn into_proposal(
        self,
        id: String,
        event_session: &crate::domain::SessionId,
        source_actor: &str,
        in_response_to: &str,
        now: u64,
    ) -> Proposal<S> {
        Proposal {
            id,
            session: event_session.clone(),
            source_actor: source_actor.to_string(),
            action: self.action,
            priority: self.priority,
            timeout_s: self.timeout_s,
            decay_rate: self.decay_rate,
            submitted_at: now,
            in_response_to: in_response_to.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("actor {actor} failed: {reason}")]
pub struct ActorError {
    pub actor: String,
    pub reason: String,
}

pub trait Actor<S>: Send {
    fn name(&self) -> &str;
    fn interested_in(&self, label: &str) -> bool;
    /// At most one proposal per event.
    fn propose(&mut self, event: &AnnotatedEvent) -> Result<Option<ProposalDraft<S>>, ActorError>;
}

/// Substitutes `{key}` placeholders from `payload`.
///
/// Returns `None` when any placeholder has no value. Braces that do not
/// enclose an identifier are copied through unchanged.
pub fn render_template(template: &str, payload: &Payload) -> Option<String> {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let key_len = after
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(after.len());
        if key_len > 0 && after[key_len..].starts_with('}') {
            let key = &after[..key_len];
            out.push_str(payload.get(key)?);
            rest = &after[key_len + 1..];
        } else {
            out.push('{');
            rest = after;
        }
    }
    out.push_str(rest);
    Some(out)
}

/// Configuration of one templated actor, as read from config files.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateActorSpec {
    pub name: String,
    pub author: String,
    /// Event label to response template. A template of several lines holds
    /// alternatives that are used in turn, one per event.
    pub templates: BTreeMap<String, String>,
    pub priority: f64,
    pub timeout_s: f64,
    pub decay_rate: f64,
}

impl TemplateActorSpec {
    fn new(
        name: &str,
        templates: &[(&str, &str)],
        priority: f64,
        timeout_s: f64,
        decay_rate: f64,
    ) -> Self {
        Self {
            name: name.to_string(),
            author: DEFAULT_AUTHOR.to_string(),
            templates: templates
                .iter()
                .map(|(l, t)| (l.to_string(), t.to_string()))
                .collect(),
            priority,
            timeout_s,
            decay_rate,
        }
    }

    pub fn greeter() -> Self {
        Self::new(
            "greeter",
            &[("presence_join", "Welcome, {name}!")],
            0.4,
            20.0,
            0.01,
        )
    }

    pub fn apt() -> Self {
        Self::new(
            "apt",
            &[
                (
                    "apt_opportunity",
                    "{sender}, can you say more about why that works?",
                ),
                (
                    "apt_revoice",
                    "{peer}, can you put {sender}'s question in your own words?",
                ),
            ],
            0.6,
            45.0,
            0.005,
        )
    }

    pub fn progression() -> Self {
        Self::new(
            "progression",
            &[("subtask_complete", "Nice work finishing task {task}!")],
            0.9,
            60.0,
            0.0,
        )
    }

    pub fn hinter() -> Self {
        Self::new(
            "hinter",
            &[(
                "inactivity",
                "It has been quiet for a while. Try splitting the pattern into smaller pieces and testing each one.\n\
                 Still stuck? Write down one line the pattern should match and one it should not.\n\
                 Quiet again. Could someone share what they have so far, even if it does not work yet?",
            )],
            0.5,
            60.0,
            0.005,
        )
    }

    /// The built-in actors, in registration order.
    pub fn builtins() -> Vec<Self> {
        vec![
            Self::greeter(),
            Self::apt(),
            Self::progression(),
            Self::hinter(),
        ]
    }

    pub fn build<S: Scalar>(&self) -> TemplateActor<S> {
        TemplateActor {
            name: self.name.clone(),
            author: self.author.clone(),
            templates: self
                .templates
                .iter()
                .map(|(label, t)| (label.clone(), alternatives(t)))
                .collect(),
            used: BTreeMap::new(),
            priority: S::from_config(self.priority),
            timeout_s: S::from_config(self.timeout_s),
            decay_rate: S::from_config(self.decay_rate),
        }
    }
}

fn alternatives(template: &str) -> Vec<String> {
    template
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect()
}

/// Proposes a rendered `Say` for each event label it has a template for.
#[derive(Debug, Clone)]
pub struct TemplateActor<S> {
    name: String,
    author: String,
    templates: BTreeMap<String, Vec<String>>,
    used: BTreeMap<String, usize>,
    priority: S,
    timeout_s: S,
    decay_rate: S,
}

impl<S: Scalar> Actor<S> for TemplateActor<S> {
    fn name(&self) -> &str {
        &self.name
    }

    fn interested_in(&self, label: &str) -> bool {
        self.templates.contains_key(label)
    }

    fn propose(&mut self, event: &AnnotatedEvent) -> Result<Option<ProposalDraft<S>>, ActorError> {
        let Some(options) = self.templates.get(&event.label).filter(|o| !o.is_empty()) else {
            return Ok(None);
        };
        let used = self.used.entry(event.label.clone()).or_default();
        let template = &options[*used % options.len()];
        *used += 1;
        let Some(text) = render_template(template, &event.payload) else {
            tracing::debug!(actor = %self.name, event = %event.id, "template placeholder unresolved");
            return Ok(None);
        };
        Ok(Some(ProposalDraft {
            action: Action::Say {
                author: self.author.clone(),
                text,
            },
            priority: self.priority,
            timeout_s: self.timeout_s,
            decay_rate: self.decay_rate,
        }))
    }
}

/// One actor's response to one event.
#[derive(Debug, Clone, PartialEq)]
pub struct Offer<S> {
    pub source_actor: String,
    pub draft: ProposalDraft<S>,
}

pub struct ActorSet<S> {
    actors: Vec<Box<dyn Actor<S>>>,
}

impl<S> Default for ActorSet<S> {
    fn default() -> Self {
        Self { actors: Vec::new() }
    }
}

impl<S> fmt::Debug for ActorSet<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.actors.iter().map(|a| a.name()))
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("actor name {0:?} is already registered")]
pub struct DuplicateActor(pub String);

impl<S: Scalar> ActorSet<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_specs(specs: &[TemplateActorSpec]) -> Result<Self, DuplicateActor> {
        let mut set = Self::new();
        for spec in specs {
            set.register(Box::new(spec.build::<S>()))?;
        }
        Ok(set)
    }

    pub fn register(&mut self, actor: Box<dyn Actor<S>>) -> Result<(), DuplicateActor> {
        if self.actors.iter().any(|a| a.name() == actor.name()) {
            return Err(DuplicateActor(actor.name().to_string()));
        }
        self.actors.push(actor);
        Ok(())
    }

    /// Offers `event` to every interested actor, in registration order.
    pub fn consume(&mut self, event: &AnnotatedEvent) -> Vec<Offer<S>> {
        let mut offers = Vec::new();
        for actor in &mut self.actors {
            if !actor.interested_in(&event.label) {
                continue;
            }
            match actor.propose(event) {
                Ok(Some(draft)) => offers.push(Offer {
                    source_actor: actor.name().to_string(),
                    draft,
                }),
                Ok(None) => {}
                Err(e) => tracing::warn!(error = %e, event = %event.id, "actor failed"),
            }
        }
        offers
    }
}
