//! Output coordinator: arbitrates competing proposals, one emission per tick.
//!
//! Each tick first expires proposals whose age reached their timeout, then
//! picks the proposal with the highest decayed priority above the emission
//! floor. Ties go to the earliest submission, then the lexicographically
//! smallest actor name, then submission order. A `Say` winner is held back
//! while the cooldown since the previous `Say` is running; commands are
//! exempt. Emitting a proposal retires every other proposal answering the
//! same event.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};

use thiserror::Error;

use crate::domain::{Action, InvalidProposal, Proposal};
use crate::scalar::Scalar;

pub const PASS_SENTINEL: &str = "[PASS]";
/// Longest `Say` the filter chain lets through, in characters.
pub const MAX_SAY_CHARS: usize = 1200;
/// How many recent agent turns the repetition filter compares against.
pub const REPEAT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinatorSettings<S> {
    pub cooldown_s: S,
    pub tick_interval_ms: u64,
    pub emit_floor: S,
    pub pass_sentinel: String,
}

impl<S: Scalar> Default for CoordinatorSettings<S> {
    fn default() -> Self {
        Self {
            cooldown_s: S::from_config(3.0),
            tick_interval_ms: 250,
            emit_floor: S::from_config(0.05),
            pass_sentinel: PASS_SENTINEL.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterReason {
    Empty,
    Pass,
    TooLong,
    Repeat,
}

impl std::fmt::Display for FilterReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterReason::Empty => "empty",
            FilterReason::Pass => "pass",
            FilterReason::TooLong => "too long",
            FilterReason::Repeat => "repeat",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SubmitError {
    #[error("invalid proposal: {0}")]
    Invalid(#[from] InvalidProposal),
    #[error("filtered out: {0}")]
    FilteredOut(FilterReason),
    #[error("event {0} has already been answered")]
    AlreadyAnswered(String),
}

/// Mechanical content checks on agent speech.
pub fn filter_chain<'a>(
    text: &str,
    pass_sentinel: &str,
    recent_agent_turns: impl IntoIterator<Item = &'a str>,
) -> Result<(), FilterReason> {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return Err(FilterReason::Empty);
    }
    if trimmed == pass_sentinel {
        return Err(FilterReason::Pass);
    }
    if text.chars().count() > MAX_SAY_CHARS {
        return Err(FilterReason::TooLong);
    }
    if recent_agent_turns.into_iter().any(|r| r == text) {
        return Err(FilterReason::Repeat);
    }
    Ok(())
}

/// `max(0, priority - decay_rate * age_s)`.
pub fn effective_priority<S: Scalar>(proposal: &Proposal<S>, now: u64) -> S {
    let age = S::from_millis(now.saturating_sub(proposal.submitted_at));
    (proposal.priority - proposal.decay_rate * age).max_of(S::zero())
}

fn age_reached_timeout<S: Scalar>(proposal: &Proposal<S>, now: u64) -> bool {
    S::from_millis(now.saturating_sub(proposal.submitted_at)) >= proposal.timeout_s
}

#[derive(Debug, Clone)]
struct Pending<S> {
    order: u64,
    proposal: Proposal<S>,
}

/// Arbitration state of one session.
#[derive(Debug, Clone)]
pub struct Coordinator<S> {
    settings: CoordinatorSettings<S>,
    pending: Vec<Pending<S>>,
    last_emit_at: Option<u64>,
    recent_says: VecDeque<String>,
    answered: HashSet<String>,
    next_order: u64,
}

impl<S: Scalar> Coordinator<S> {
    pub fn new(settings: CoordinatorSettings<S>) -> Self {
        Self {
            settings,
            pending: Vec::new(),
            last_emit_at: None,
            recent_says: VecDeque::with_capacity(REPEAT_WINDOW),
            answered: HashSet::new(),
            next_order: 0,
        }
    }

    pub fn settings(&self) -> &CoordinatorSettings<S> {
        &self.settings
    }

    pub fn pending(&self) -> impl Iterator<Item = &Proposal<S>> {
        self.pending.iter().map(|p| &p.proposal)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    pub fn last_emit_at(&self) -> Option<u64> {
        self.last_emit_at
    }

    fn filter(&self, action: &Action) -> Result<(), FilterReason> {
        match action {
            Action::Say { text, .. } => filter_chain(
                text,
                &self.settings.pass_sentinel,
                self.recent_says.iter().map(String::as_str),
            ),
            Action::Command { .. } => Ok(()),
        }
    }

    /// Validates and filters `proposal`, then adds it to the pending set.
    pub fn submit(&mut self, proposal: Proposal<S>) -> Result<(), SubmitError> {
        proposal.validate()?;
        self.filter(&proposal.action)
            .map_err(SubmitError::FilteredOut)?;
        if self.answered.contains(&proposal.in_response_to) {
            return Err(SubmitError::AlreadyAnswered(proposal.in_response_to));
        }
        self.pending.push(Pending {
            order: self.next_order,
            proposal,
        });
        self.next_order += 1;
        Ok(())
    }

    fn cooling_down(&self, now: u64) -> bool {
        self.last_emit_at
            .is_some_and(|last| S::from_millis(now.saturating_sub(last)) < self.settings.cooldown_s)
    }

    fn rank(&self, a: &Pending<S>, b: &Pending<S>, now: u64) -> Ordering {
        let ea = effective_priority(&a.proposal, now);
        let eb = effective_priority(&b.proposal, now);
        eb.partial_cmp(&ea)
            .unwrap_or(Ordering::Equal)
            .then(a.proposal.submitted_at.cmp(&b.proposal.submitted_at))
            .then_with(|| a.proposal.source_actor.cmp(&b.proposal.source_actor))
            .then(a.order.cmp(&b.order))
    }

    /// Runs one arbitration round and returns the emitted proposal, if any.
    pub fn tick(&mut self, now: u64) -> Option<Proposal<S>> {
        self.pending.retain(|p| {
            let keep = !age_reached_timeout(&p.proposal, now);
            if !keep {
                tracing::debug!(proposal = %p.proposal.id, "proposal expired");
            }
            keep
        });
        loop {
            let best = self
                .pending
                .iter()
                .enumerate()
                .filter(|(_, p)| effective_priority(&p.proposal, now) > self.settings.emit_floor)
                .min_by(|(_, a), (_, b)| self.rank(a, b, now))
                .map(|(i, _)| i)?;
            let action = &self.pending[best].proposal.action;
            if action.is_say() {
                // a repeat may have become one since submission
                if let Err(reason) = self.filter(action) {
                    let dropped = self.pending.remove(best);
                    tracing::debug!(proposal = %dropped.proposal.id, %reason, "dropped at emission");
                    continue;
                }
                if self.cooling_down(now) {
                    return None;
                }
            }
            let winner = self.pending.remove(best).proposal;
            if let Action::Say { text, .. } = &winner.action {
                self.last_emit_at = Some(now);
                if self.recent_says.len() == REPEAT_WINDOW {
                    self.recent_says.pop_front();
                }
                self.recent_says.push_back(text.clone());
            }
            self.pending
                .retain(|p| p.proposal.in_response_to != winner.in_response_to);
            self.answered.insert(winner.in_response_to.clone());
            return Some(winner);
        }
    }
}
