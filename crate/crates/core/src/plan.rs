//! Sequential activity plans: each stage fires once, in order, on a timer or
//! an event, and hands its prompt and commands to the coordinator.

use thiserror::Error;

use crate::actors::{ProposalDraft, DEFAULT_AUTHOR};
use crate::domain::{Action, AnnotatedEvent, Payload};
use crate::scalar::Scalar;

/// Lifetime of plan proposals in the coordinator.
pub const PLAN_TIMEOUT_S: f64 = 300.0;

#[derive(Debug, Clone, PartialEq)]
pub enum StageTrigger {
    /// Seconds after the plan started.
    AfterSeconds(f64),
    /// An event label, optionally requiring one payload entry.
    OnEvent {
        label: String,
        matching: Option<(String, String)>,
    },
}

impl StageTrigger {
    fn matches_event(&self, event: &AnnotatedEvent) -> bool {
        match self {
            StageTrigger::OnEvent { label, matching } => {
                event.label == *label
                    && matching
                        .as_ref()
                        .is_none_or(|(k, v)| event.payload.get(k) == Some(v))
            }
            StageTrigger::AfterSeconds(_) => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub id: String,
    pub trigger: StageTrigger,
    pub prompt: Option<String>,
    pub commands: Vec<(String, Payload)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub stages: Vec<Stage>,
    /// Author label of plan speech.
    pub author: String,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("plan has no stages")]
    Empty,
    #[error("stage {0} has a negative or non-finite delay")]
    BadDelay(String),
    #[error("stage {0} has neither a prompt nor commands")]
    EmptyStage(String),
}

impl Plan {
    pub fn new(stages: Vec<Stage>) -> Self {
        Self {
            stages,
            author: DEFAULT_AUTHOR.to_string(),
        }
    }

    pub fn validate(&self) -> Result<(), PlanError> {
        if self.stages.is_empty() {
            return Err(PlanError::Empty);
        }
        for stage in &self.stages {
            if let StageTrigger::AfterSeconds(t) = stage.trigger {
                if !(t.is_finite() && t >= 0.0) {
                    return Err(PlanError::BadDelay(stage.id.clone()));
                }
            }
            if stage.prompt.is_none() && stage.commands.is_empty() {
                return Err(PlanError::EmptyStage(stage.id.clone()));
            }
        }
        Ok(())
    }
}

/// One emission of a fired stage. `key` is unique per emission so that the
/// coordinator never retires one stage action in favour of another.
#[derive(Debug, Clone, PartialEq)]
pub struct StageEmission<S> {
    pub stage: String,
    pub key: String,
    pub draft: ProposalDraft<S>,
}

/// A plan running in one session.
#[derive(Debug, Clone)]
pub struct PlanRun {
    plan: Plan,
    started_at: u64,
    current: usize,
}

impl PlanRun {
    pub fn start(plan: Plan, now: u64) -> Result<Self, PlanError> {
        plan.validate()?;
        Ok(Self {
            plan,
            started_at: now,
            current: 0,
        })
    }

    pub fn current_stage(&self) -> Option<&Stage> {
        self.plan.stages.get(self.current)
    }

    pub fn fired(&self) -> usize {
        self.current
    }

    pub fn is_finished(&self) -> bool {
        self.current >= self.plan.stages.len()
    }

    /// Fires every timed stage that is due, in order.
    pub fn on_tick<S: Scalar>(&mut self, now: u64) -> Vec<StageEmission<S>> {
        let mut out = Vec::new();
        while let Some(stage) = self.current_stage() {
            let StageTrigger::AfterSeconds(t) = stage.trigger else {
                break;
            };
            let elapsed_ms = now.saturating_sub(self.started_at) as f64;
            if elapsed_ms < t * 1000.0 {
                break;
            }
            out.extend(self.fire());
        }
        out
    }

    /// Fires the current stage if `event` is what it waits for.
    pub fn on_event<S: Scalar>(&mut self, event: &AnnotatedEvent) -> Vec<StageEmission<S>> {
        match self.current_stage() {
            Some(stage) if stage.trigger.matches_event(event) => self.fire(),
            _ => Vec::new(),
        }
    }

    fn fire<S: Scalar>(&mut self) -> Vec<StageEmission<S>> {
        let stage = &self.plan.stages[self.current];
        self.current += 1;
        let one = S::one();
        let timeout = S::from_config(PLAN_TIMEOUT_S);
        let mut out = Vec::new();
        if let Some(prompt) = &stage.prompt {
            out.push(StageEmission {
                stage: stage.id.clone(),
                key: format!("plan:{}:prompt", stage.id),
                draft: ProposalDraft {
                    action: Action::Say {
                        author: self.plan.author.clone(),
                        text: prompt.clone(),
                    },
                    priority: one,
                    timeout_s: timeout,
                    decay_rate: S::zero(),
                },
            });
        }
        for (i, (name, payload)) in stage.commands.iter().enumerate() {
            out.push(StageEmission {
                stage: stage.id.clone(),
                key: format!("plan:{}:command{}", stage.id, i),
                draft: ProposalDraft {
                    action: Action::Command {
                        name: name.clone(),
                        payload: payload.clone(),
                    },
                    priority: one,
                    timeout_s: timeout,
                    decay_rate: S::zero(),
                },
            });
        }
        tracing::debug!(stage = %stage.id, emissions = out.len(), "plan stage fired");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Assessment, SessionId, Trigger};

    fn stage(id: &str, trigger: StageTrigger, prompt: Option<&str>, reveal: Option<&str>) -> Stage {
        Stage {
            id: id.into(),
            trigger,
            prompt: prompt.map(String::from),
            commands: reveal
                .map(|t| {
                    vec![(
                        "reveal_task".to_string(),
                        Payload::from([("task".to_string(), t.to_string())]),
                    )]
                })
                .unwrap_or_default(),
        }
    }

    fn on_task(task: &str) -> StageTrigger {
        StageTrigger::OnEvent {
            label: "subtask_complete".into(),
            matching: Some(("task".into(), task.into())),
        }
    }

    fn event(label: &str, task: &str) -> AnnotatedEvent {
        AnnotatedEvent {
            id: "e".into(),
            session: SessionId::new("s").unwrap(),
            source_listener: "subtask".into(),
            label: label.into(),
            assessment: Assessment {
                note: String::new(),
                confidence: 1.0,
            },
            trigger: Trigger::Tick { at: 0 },
            payload: Payload::from([("task".to_string(), task.to_string())]),
            created_at: 0,
        }
    }

    #[test]
    fn zero_delay_stage_fires_on_first_tick() {
        let plan = Plan::new(vec![stage(
            "1",
            StageTrigger::AfterSeconds(0.0),
            Some("Welcome"),
            Some("1"),
        )]);
        let mut run = PlanRun::start(plan, 1_000).unwrap();
        let out = run.on_tick::<f64>(1_000);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].draft.priority, 1.0);
        assert_eq!(out[0].draft.decay_rate, 0.0);
        assert_eq!(out[0].draft.timeout_s, 300.0);
        assert!(
            matches!(&out[0].draft.action, Action::Say { author, text } if author == "Bot" && text == "Welcome")
        );
        assert!(
            matches!(&out[1].draft.action, Action::Command { name, .. } if name == "reveal_task")
        );
        assert_ne!(out[0].key, out[1].key);
        assert!(run.is_finished());
        assert!(run.on_tick::<f64>(99_000).is_empty());
    }

    #[test]
    fn invalid_plans() {
        assert_eq!(
            PlanRun::start(Plan::new(vec![]), 0).unwrap_err(),
            PlanError::Empty
        );
        let neg = Plan::new(vec![stage(
            "1",
            StageTrigger::AfterSeconds(-1.0),
            Some("x"),
            None,
        )]);
        assert!(matches!(
            PlanRun::start(neg, 0),
            Err(PlanError::BadDelay(_))
        ));
        let empty = Plan::new(vec![stage(
            "1",
            StageTrigger::AfterSeconds(1.0),
            None,
            None,
        )]);
        assert!(matches!(
            PlanRun::start(empty, 0),
            Err(PlanError::EmptyStage(_))
        ));
    }

    #[test]
    fn event_stage_fires_and_advances() {
        let plan = Plan::new(vec![
            stage("1", on_task("1"), Some("Task 2 is open"), Some("2")),
            stage("2", on_task("2"), Some("Task 3 is open"), Some("3")),
        ]);
        let mut run = PlanRun::start(plan, 0).unwrap();
        assert!(run.on_tick::<f64>(10_000).is_empty());
        let out = run.on_event::<f64>(&event("subtask_complete", "1"));
        assert_eq!(out.len(), 2);
        assert_eq!(run.fired(), 1);
    }

    #[test]
    fn later_stage_never_fires_early() {
        let plan = Plan::new(vec![
            stage("1", on_task("1"), Some("a"), None),
            stage("2", on_task("2"), Some("b"), None),
        ]);
        let mut run = PlanRun::start(plan, 0).unwrap();
        assert!(run
            .on_event::<f64>(&event("subtask_complete", "2"))
            .is_empty());
        assert!(run.on_event::<f64>(&event("greeting", "1")).is_empty());
        assert_eq!(run.fired(), 0);
        assert_eq!(
            run.on_event::<f64>(&event("subtask_complete", "1")).len(),
            1
        );
        // the earlier task=2 event is not remembered
        assert_eq!(run.fired(), 1);
    }

    #[test]
    fn consecutive_timers_fire_once_in_order() {
        let plan = Plan::new(vec![
            stage("a", StageTrigger::AfterSeconds(10.0), Some("ten"), None),
            stage("b", StageTrigger::AfterSeconds(20.0), Some("twenty"), None),
        ]);
        let mut run = PlanRun::start(plan.clone(), 0).unwrap();
        let mut fired = Vec::new();
        for t in (0..=25_000).step_by(250) {
            for e in run.on_tick::<f64>(t) {
                fired.push((t, e.stage));
            }
        }
        assert_eq!(
            fired,
            [(10_000, "a".to_string()), (20_000, "b".to_string())]
        );

        // a clock jump straight to 25 s fires both, in order
        let mut run = PlanRun::start(plan, 0).unwrap();
        let stages: Vec<String> = run
            .on_tick::<f64>(25_000)
            .into_iter()
            .map(|e| e.stage)
            .collect();
        assert_eq!(stages, ["a", "b"]);
        assert!(run.on_tick::<f64>(30_000).is_empty());
    }

    #[test]
    fn event_without_payload_match() {
        let plan = Plan::new(vec![stage(
            "1",
            StageTrigger::OnEvent {
                label: "greeting".into(),
                matching: None,
            },
            Some("hello"),
            None,
        )]);
        let mut run = PlanRun::start(plan, 0).unwrap();
        assert_eq!(run.on_event::<f64>(&event("greeting", "anything")).len(), 1);
    }
}
