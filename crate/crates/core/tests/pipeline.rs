use std::path::PathBuf;
use std::sync::Arc;

use futures::executor::block_on;
use huddle_core::actors::TemplateActorSpec;
use huddle_core::config;
use huddle_core::domain::{Action, Payload, Role, SessionId, StateKind};
use huddle_core::engine::{LlmJob, PipelineConfig, SessionEngine};
use huddle_core::history::{chat_history, replay_log, HistoryStore, LogRecord};
use huddle_core::llm::{LlmError, MockBackend};
use huddle_core::replay::{self, ReplayOptions};
use huddle_core::wire::{PresenceEvent, ServerFrame};

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn tutor(context_length: usize) -> huddle_core::llm::AgentSpec {
    let mut spec = config::load_agent_file(&fixture("agents/tutor.agent")).unwrap();
    spec.llm.context_length = context_length;
    spec
}

/// One engine driven tick by tick, with LLM jobs answered on the next tick.
struct Sim<'a> {
    engine: SessionEngine<f64>,
    backend: &'a MockBackend,
    jobs: Vec<LlmJob>,
    frames: Vec<(u64, ServerFrame)>,
    now: u64,
}

impl<'a> Sim<'a> {
    fn new(config: PipelineConfig, history: Arc<HistoryStore>, backend: &'a MockBackend) -> Self {
        let session = SessionId::new("room").unwrap();
        Self {
            engine: SessionEngine::new(session, Arc::new(config), history, 0).unwrap(),
            backend,
            jobs: Vec::new(),
            frames: Vec::new(),
            now: 0,
        }
    }

    fn take(&mut self, step: huddle_core::engine::Step) {
        let now = self.now;
        self.frames
            .extend(step.frames.into_iter().map(|f| (now, f)));
        self.jobs.extend(step.jobs);
    }

    /// Advances tick by tick until `until` (inclusive).
    fn run_to(&mut self, until: u64) {
        while self.now + 250 <= until {
            self.now += 250;
            for job in std::mem::take(&mut self.jobs) {
                let result = block_on(job.run(self.backend));
                let step = self.engine.on_completion(&job, result, self.now);
                self.take(step);
            }
            let step = self.engine.on_tick(self.now);
            self.take(step);
        }
    }

    fn chat(&mut self, sender: &str, text: &str) {
        let step = self.engine.on_chat(sender, text, self.now).unwrap();
        self.take(step);
    }

    fn join(&mut self, name: &str) {
        let step = self.engine.on_presence(PresenceEvent::Join, name, self.now);
        self.take(step);
    }

    fn subtask(&mut self, task: &str) {
        let payload = Payload::from([("task".to_string(), task.to_string())]);
        let step = self
            .engine
            .on_state(StateKind::SubtaskComplete, payload, self.now)
            .unwrap();
        self.take(step);
    }

    fn agent_chats(&self) -> Vec<(u64, String, String)> {
        self.frames
            .iter()
            .filter_map(|(at, f)| match f {
                ServerFrame::Chat {
                    sender,
                    role: Role::Agent,
                    text,
                    ..
                } => Some((*at, sender.clone(), text.clone())),
                _ => None,
            })
            .collect()
    }
}

#[test]
fn context_window_holds_exactly_the_last_n_turns() {
    let backend = MockBackend::parse("").unwrap();
    let config = PipelineConfig {
        agents: vec![tutor(5)],
        ..PipelineConfig::default()
    };
    let mut sim = Sim::new(config, Arc::new(HistoryStore::in_memory()), &backend);
    for turn in 1..=12 {
        let speaker = if turn % 2 == 0 { "Ben" } else { "Ada" };
        sim.chat(speaker, &format!("turn {turn} about digits"));
        sim.run_to(sim.now + 250);
    }
    let last = backend.captured().pop().expect("a request was sent");
    let expected: Vec<String> = (8..=12)
        .map(|t| {
            format!(
                "{}: turn {t} about digits",
                if t % 2 == 0 { "Ben" } else { "Ada" }
            )
        })
        .collect();
    let got: Vec<String> = last.bundle.transcript.iter().map(|e| e.render()).collect();
    assert_eq!(got, expected);
    assert!(last
        .bundle
        .system
        .contains("You are an expert programming tutor"));
    let body_turns: Vec<&str> = last.body["messages"]
        .as_array()
        .unwrap()
        .iter()
        .skip(1)
        .map(|m| m["content"].as_str().unwrap())
        .collect();
    assert_eq!(body_turns, expected);
    assert_eq!(last.body["messages"][0]["role"], "system");
}

fn hint_times(sim: &Sim) -> Vec<u64> {
    let hints = TemplateActorSpec::hinter().templates["inactivity"].clone();
    sim.agent_chats()
        .into_iter()
        .filter(|(_, _, text)| hints.lines().any(|h| h.trim() == text))
        .map(|(at, _, _)| at)
        .collect()
}

#[test]
fn inactivity_fires_once_per_silence_and_rearms_on_chat() {
    let backend = MockBackend::parse("").unwrap();
    let mut sim = Sim::new(
        PipelineConfig::default(),
        Arc::new(HistoryStore::in_memory()),
        &backend,
    );
    sim.join("Ada");
    sim.run_to(119_750);
    assert!(hint_times(&sim).is_empty());
    sim.run_to(400_000);
    assert_eq!(hint_times(&sim), [120_000]);
    sim.chat("Ada", "still working on task one");
    sim.run_to(519_750);
    assert_eq!(hint_times(&sim), [120_000]);
    sim.run_to(900_000);
    assert_eq!(hint_times(&sim), [120_000, 520_000]);
}

#[test]
fn plan_stages_fire_once_each_in_order() {
    let plan = config::load_plan_file(&fixture("regex8.plan")).unwrap();
    let prompts: Vec<String> = plan
        .stages
        .iter()
        .map(|s| s.prompt.clone().unwrap())
        .collect();
    let backend = MockBackend::parse("").unwrap();
    let history = Arc::new(HistoryStore::in_memory());
    let config = PipelineConfig {
        plan: Some(plan),
        ..PipelineConfig::default()
    };
    let mut sim = Sim::new(config, history.clone(), &backend);
    sim.join("Ada");
    sim.run_to(5_000);
    for task in 1..=7 {
        sim.subtask(&task.to_string());
        // repeats and out-of-order reports must not advance the plan
        sim.subtask(&task.to_string());
        sim.subtask("8");
        sim.run_to(sim.now + 10_000);
    }
    sim.run_to(sim.now + 30_000);
    assert_eq!(sim.engine.plan().unwrap().fired(), 8);
    assert!(sim.engine.plan().unwrap().is_finished());

    let mut log = Vec::new();
    for (_, frame) in &sim.frames {
        match frame {
            ServerFrame::Chat { text, .. } if prompts.contains(text) => {
                log.push(format!("prompt {text}"))
            }
            ServerFrame::Command { name, payload, .. } => {
                log.push(format!("command {name} task={}", payload["task"]))
            }
            _ => {}
        }
    }
    let mut expected = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        expected.push(format!("prompt {prompt}"));
        expected.push(format!("command reveal_task task={}", i + 1));
    }
    assert_eq!(log, expected);

    let session = SessionId::new("room").unwrap();
    let logged = history.messages(&session);
    for prompt in &prompts {
        assert_eq!(logged.iter().filter(|m| &m.text == prompt).count(), 1);
    }
}

#[test]
fn session_log_round_trips_into_the_same_history() {
    let dir = tempfile::tempdir().unwrap();
    let history = Arc::new(HistoryStore::with_log_dir(dir.path()));
    let backend = config_backend();
    let lines = transcript();
    let out = replay::run::<f64>(
        Arc::new(fixture_config()),
        &backend,
        &lines,
        ReplayOptions {
            history: history.clone(),
            ..ReplayOptions::default()
        },
    );
    for name in ["regex-1", "regex-2"] {
        let session = SessionId::new(name).unwrap();
        let records = replay_log(history.log_path(&session).unwrap()).unwrap();
        assert_eq!(chat_history(&records), history.messages(&session));
        let seqs: Vec<u64> = records.iter().map(|r| r.seq).collect();
        assert!(seqs.windows(2).all(|w| w[0] < w[1]));
        let commands: Vec<Action> = records
            .iter()
            .filter_map(|r| match &r.record {
                LogRecord::Action(a) => Some(a.action.clone()),
                _ => None,
            })
            .collect();
        let sent = out
            .captured
            .iter()
            .filter(|c| c.client == if name == "regex-1" { "ada" } else { "cy" })
            .filter_map(|c| match &c.frame {
                ServerFrame::Command { name, payload, .. } => Some(Action::Command {
                    name: name.clone(),
                    payload: payload.clone(),
                }),
                _ => None,
            })
            .count();
        assert_eq!(commands.len(), sent);
    }
}

fn fixture_config() -> PipelineConfig {
    let server = config::load_server_file(&fixture("server.conf")).unwrap();
    let agents = config::load_agents_dir(&fixture("agents")).unwrap();
    let plan = config::load_plan_file(&fixture("regex8.plan")).unwrap();
    PipelineConfig {
        server,
        agents,
        plan: Some(plan),
    }
}

fn config_backend() -> MockBackend {
    MockBackend::parse(&std::fs::read_to_string(fixture("script.txt")).unwrap()).unwrap()
}

fn transcript() -> Vec<replay::TranscriptLine> {
    replay::parse_transcript(&std::fs::read_to_string(fixture("replay/session.jsonl")).unwrap())
        .unwrap()
}

#[test]
fn replay_is_deterministic() {
    let run = || {
        replay::run::<f64>(
            Arc::new(fixture_config()),
            &config_backend(),
            &transcript(),
            ReplayOptions::default(),
        )
        .to_jsonl()
    };
    let first = run();
    assert_eq!(first, run());
    let golden = std::fs::read_to_string(fixture("replay/session.golden.jsonl")).unwrap();
    replay::compare(&first, &golden).unwrap();
}

#[test]
fn failing_backend_behaves_like_having_no_agents() {
    let clean: Vec<replay::TranscriptLine> = transcript()
        .into_iter()
        .filter(|l| {
            let text = l.frame.as_ref().map(|f| f.to_string()).unwrap_or_default();
            !text.contains("shout") && !text.contains("\"   \"") && !text.contains("{}")
        })
        .collect();
    let run = |config: PipelineConfig, backend: &MockBackend| {
        replay::run::<f64>(Arc::new(config), backend, &clean, ReplayOptions::default())
    };
    let failing = MockBackend::failing(LlmError::HttpStatus(503));
    let with_agents = run(fixture_config(), &failing);
    let mut agentless = fixture_config();
    agentless.agents.clear();
    let without = run(agentless, &MockBackend::parse("").unwrap());

    assert!(!failing.captured().is_empty(), "agents were consulted");
    assert_eq!(with_agents.to_jsonl(), without.to_jsonl());
    let frames: Vec<&ServerFrame> = with_agents.captured.iter().map(|c| &c.frame).collect();
    assert!(!frames
        .iter()
        .any(|f| matches!(f, ServerFrame::Error { .. })));
    let agent_turns = frames
        .iter()
        .filter(|f| matches!(f, ServerFrame::Chat { sender, .. } if sender == "Tutor" || sender == "Facilitator"))
        .count();
    assert_eq!(agent_turns, 0);
    let bot_lines: Vec<&str> = frames
        .iter()
        .filter_map(|f| match f {
            ServerFrame::Chat { sender, text, .. } if sender == "Bot" => Some(text.as_str()),
            _ => None,
        })
        .collect();
    assert!(bot_lines.iter().any(|t| t.starts_with("Welcome, Ada!")));
    assert!(bot_lines
        .iter()
        .any(|t| t.starts_with("Nice work finishing task 1")));
    assert!(frames
        .iter()
        .any(|f| matches!(f, ServerFrame::Command { .. })));
}
