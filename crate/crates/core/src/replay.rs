//! Offline replay: drives a recorded transcript through the pipeline on a
//! virtual clock and compares the captured frames with a golden file.
//!
//! Transcript lines look like
//! `{"at_ms":1500,"client":"ada","frame":{"type":"chat","text":"hi"}}`;
//! `"close":true` instead of `"frame"` disconnects the client. `client`
//! defaults to `"client"`. Input times are rounded down to the tick grid.
//! Captured lines are `{"at_ms":..,"client":..,"frame":{..}}`, one per
//! delivered frame.
//!
//! LLM jobs complete one tick after they are issued.

use std::collections::BTreeMap;
use std::sync::Arc;

use futures::executor::block_on;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use similar::TextDiff;
use thiserror::Error;

use crate::engine::{LlmJob, PipelineConfig};
use crate::gateway::{ConnId, Hub, HubOutput};
use crate::history::HistoryStore;
use crate::llm::LlmBackend;
use crate::scalar::Scalar;
use crate::wire::{parse_client_frame, strip_timestamps, ServerFrame};

/// Quiet time simulated after the last input.
pub const DEFAULT_SETTLE_MS: u64 = 10_000;

const DEFAULT_CLIENT: &str = "client";

fn default_client() -> String {
    DEFAULT_CLIENT.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptLine {
    pub at_ms: u64,
    #[serde(default = "default_client")]
    pub client: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame: Option<Value>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub close: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("transcript line {line}: {reason}")]
pub struct TranscriptError {
    pub line: usize,
    pub reason: String,
}

/// Parses a JSONL transcript. Times must not go backwards.
pub fn parse_transcript(text: &str) -> Result<Vec<TranscriptLine>, TranscriptError> {
    let mut out: Vec<TranscriptLine> = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = index + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let entry: TranscriptLine = serde_json::from_str(raw).map_err(|e| TranscriptError {
            line,
            reason: e.to_string(),
        })?;
        if entry.frame.is_some() == entry.close {
            return Err(TranscriptError {
                line,
                reason: "expected exactly one of \"frame\" or \"close\"".into(),
            });
        }
        if out.last().is_some_and(|prev| prev.at_ms > entry.at_ms) {
            return Err(TranscriptError {
                line,
                reason: "at_ms goes backwards".into(),
            });
        }
        out.push(entry);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapturedFrame {
    pub at_ms: u64,
    pub client: String,
    pub frame: ServerFrame,
}

#[derive(Debug, Clone)]
pub struct ReplayOptions {
    pub settle_ms: u64,
    pub history: Arc<HistoryStore>,
}

impl Default for ReplayOptions {
    fn default() -> Self {
        Self {
            settle_ms: DEFAULT_SETTLE_MS,
            history: Arc::new(HistoryStore::in_memory()),
        }
    }
}

pub struct Replay {
    pub captured: Vec<CapturedFrame>,
    pub history: Arc<HistoryStore>,
}

impl Replay {
    pub fn to_jsonl(&self) -> String {
        render_capture(&self.captured)
    }
}

pub fn render_capture(frames: &[CapturedFrame]) -> String {
    frames
        .iter()
        .map(|f| serde_json::to_string(f).expect("captured frames serialize") + "\n")
        .collect()
}

struct Driver<'a, S> {
    hub: Hub<S>,
    backend: &'a dyn LlmBackend,
    clients: BTreeMap<String, ConnId>,
    names: Vec<String>,
    captured: Vec<CapturedFrame>,
    pending_jobs: Vec<LlmJob>,
}

impl<S: Scalar> Driver<'_, S> {
    fn conn(&mut self, client: &str) -> ConnId {
        if let Some(conn) = self.clients.get(client) {
            return *conn;
        }
        let conn = self.names.len() as ConnId;
        self.names.push(client.to_string());
        self.clients.insert(client.to_string(), conn);
        conn
    }

    fn record(&mut self, at_ms: u64, out: HubOutput) {
        for routed in out.frames {
            self.captured.push(CapturedFrame {
                at_ms,
                client: self.names[routed.conn as usize].clone(),
                frame: routed.frame,
            });
        }
        self.pending_jobs.extend(out.jobs);
    }

    fn complete_jobs(&mut self, now: u64) {
        for job in std::mem::take(&mut self.pending_jobs) {
            let result = block_on(job.run(self.backend));
            let out = self.hub.completion(&job, result, now);
            self.record(now, out);
        }
    }

    fn input(&mut self, line: &TranscriptLine, now: u64) {
        let conn = self.conn(&line.client);
        let out = match &line.frame {
            Some(frame) => match parse_client_frame(&frame.to_string()) {
                Ok(frame) => self.hub.handle(conn, frame, now),
                Err(error) => HubOutput {
                    frames: vec![crate::gateway::Routed { conn, frame: error }],
                    jobs: Vec::new(),
                },
            },
            None => self.hub.disconnect(conn, now),
        };
        self.record(now, out);
    }
}

/// Runs `lines` through a fresh pipeline, single-threaded.
pub fn run<S: Scalar>(
    config: Arc<PipelineConfig>,
    backend: &dyn LlmBackend,
    lines: &[TranscriptLine],
    options: ReplayOptions,
) -> Replay {
    let tick = config.server.tick_interval_ms.max(1);
    let snap = |t: u64| t - t % tick;
    let end = lines.last().map(|l| snap(l.at_ms)).unwrap_or(0) + options.settle_ms;
    let mut driver = Driver::<S> {
        hub: Hub::new(config, options.history.clone()),
        backend,
        clients: BTreeMap::new(),
        names: Vec::new(),
        captured: Vec::new(),
        pending_jobs: Vec::new(),
    };
    let mut next = 0;
    let mut now = 0;
    while now <= end {
        driver.complete_jobs(now);
        while let Some(line) = lines.get(next).filter(|l| snap(l.at_ms) == now) {
            driver.input(line, now);
            next += 1;
        }
        let out = driver.hub.tick(now);
        driver.record(now, out);
        now += tick;
    }
    Replay {
        captured: driver.captured,
        history: options.history,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CompareError {
    #[error("golden line {line}: {reason}")]
    BadGolden { line: usize, reason: String },
    #[error("frame {index} differs from the golden file\n{diff}")]
    Mismatch { index: usize, diff: String },
}

fn normalize(text: &str, name: &str) -> Result<Vec<String>, CompareError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let mut value: Value =
                serde_json::from_str(l).map_err(|e| CompareError::BadGolden {
                    line: i + 1,
                    reason: format!("{name}: {e}"),
                })?;
            if let Some(frame) = value.get_mut("frame") {
                strip_timestamps(frame);
            }
            Ok(value.to_string())
        })
        .collect()
}

/// Compares captured output with a golden file, ignoring `ts` fields.
pub fn compare(captured: &str, golden: &str) -> Result<(), CompareError> {
    let ours = normalize(captured, "captured")?;
    let theirs = normalize(golden, "golden")?;
    if ours == theirs {
        return Ok(());
    }
    let index = ours
        .iter()
        .zip(&theirs)
        .position(|(a, b)| a != b)
        .unwrap_or(ours.len().min(theirs.len()));
    let (golden_text, captured_text) = (theirs.join("\n") + "\n", ours.join("\n") + "\n");
    let diff = TextDiff::from_lines(&golden_text, &captured_text)
        .unified_diff()
        .header("golden", "captured")
        .to_string();
    Err(CompareError::Mismatch { index, diff })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::MockBackend;

    const TRANSCRIPT: &str = r#"{"at_ms":0,"client":"ada","frame":{"type":"join","session":"s1","name":"Ada"}}
{"at_ms":120,"client":"ben","frame":{"type":"join","session":"s1","name":"Ben"}}
{"at_ms":4000,"client":"ada","frame":{"type":"chat","text":"hello everyone"}}
{"at_ms":4100,"client":"ben","frame":{"type":"bogus"}}
{"at_ms":9000,"client":"ben","close":true}
"#;

    fn replay() -> String {
        let lines = parse_transcript(TRANSCRIPT).unwrap();
        let backend = MockBackend::parse("").unwrap();
        run::<f64>(
            Arc::new(PipelineConfig::default()),
            &backend,
            &lines,
            ReplayOptions::default(),
        )
        .to_jsonl()
    }

    #[test]
    fn times_snap_down_to_ticks() {
        let out = replay();
        let first: CapturedFrame = serde_json::from_str(out.lines().nth(2).unwrap()).unwrap();
        assert_eq!(first.at_ms, 0);
        assert!(out.contains(
            r#""at_ms":4000,"client":"ben","frame":{"type":"error","code":"UNKNOWN_TYPE""#
        ));
    }

    #[test]
    fn deterministic_and_matches_itself() {
        let a = replay();
        let b = replay();
        assert_eq!(a, b);
        assert_eq!(compare(&a, &b), Ok(()));
    }

    #[test]
    fn changed_line_is_reported_by_index() {
        let golden = replay();
        let altered: String = golden
            .lines()
            .enumerate()
            .map(|(i, l)| if i == 5 { l.replace("Ada", "Eve") } else { l.to_string() } + "\n")
            .collect();
        match compare(&golden, &altered) {
            Err(CompareError::Mismatch { index, diff }) => {
                assert_eq!(index, 5);
                assert!(diff.contains("Eve"));
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn timestamps_are_ignored() {
        let a = r#"{"at_ms":0,"client":"a","frame":{"type":"presence","event":"join","name":"A","ts":1}}"#;
        let b = r#"{"at_ms":0,"client":"a","frame":{"type":"presence","event":"join","name":"A","ts":99}}"#;
        assert_eq!(compare(a, b), Ok(()));
    }

    #[test]
    fn malformed_transcripts() {
        assert_eq!(parse_transcript("{\"at_ms\":1}").unwrap_err().line, 1);
        assert_eq!(parse_transcript("nope").unwrap_err().line, 1);
        let backwards = "{\"at_ms\":5,\"close\":true}\n{\"at_ms\":1,\"close\":true}";
        assert_eq!(parse_transcript(backwards).unwrap_err().line, 2);
    }
}
