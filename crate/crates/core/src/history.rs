//! Per-session chat history with dense seq numbers and a JSONL session log.
//!
//! Every session owns one log file `<log-dir>/<session>.jsonl`. Chat turns,
//! state updates and outbound commands are written to it interleaved, one
//! record per line, in the order the session produced them.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, MutexGuard};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{ActivityStateUpdate, ChatMessage, OutboundAction, Role, SessionId};

/// A chat message before the store assigns its seq.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewMessage {
    pub session: SessionId,
    pub sender: String,
    pub role: Role,
    pub text: String,
    pub ts: u64,
}

/// Body of one session log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "body", rename_all = "lowercase")]
pub enum LogRecord {
    Chat(ChatMessage),
    State(ActivityStateUpdate),
    Action(OutboundAction),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionLogRecord {
    /// Position of the record in its session log, starting at 0.
    pub seq: u64,
    #[serde(flatten)]
    pub record: LogRecord,
    pub written_at: u64,
}

#[derive(Debug, Error)]
pub enum HistoryError {
    /// The in-memory state was updated; only the disk write failed.
    #[error("failed to write session log {path}: {source}")]
    LogWrite {
        path: PathBuf,
        log_seq: u64,
        #[source]
        source: io::Error,
    },
    #[error("unknown session {0}")]
    UnknownSession(SessionId),
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("corrupt log line {line}: {reason}")]
    CorruptLine { line: usize, reason: String },
}

#[derive(Debug, Default)]
struct SessionHistory {
    messages: Vec<ChatMessage>,
    updates: Vec<(u64, ActivityStateUpdate)>,
    next_log_seq: u64,
}

impl SessionHistory {
    fn next_seq(&self) -> u64 {
        self.messages.len() as u64
    }

    fn take_log_seq(&mut self) -> u64 {
        let seq = self.next_log_seq;
        self.next_log_seq += 1;
        seq
    }
}

#[derive(Debug, Default)]
struct Inner {
    log_dir: Option<PathBuf>,
    sessions: Mutex<HashMap<SessionId, Arc<Mutex<SessionHistory>>>>,
}

/// Shared handle to all session histories.
#[derive(Debug, Clone, Default)]
pub struct HistoryStore {
    inner: Arc<Inner>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

impl HistoryStore {
    /// A store that keeps history in memory only.
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// A store that also appends every record to `<log_dir>/<session>.jsonl`.
    pub fn with_log_dir(log_dir: impl Into<PathBuf>) -> Self {
        Self {
            inner: Arc::new(Inner {
                log_dir: Some(log_dir.into()),
                sessions: Mutex::default(),
            }),
        }
    }

    pub fn log_path(&self, session: &SessionId) -> Option<PathBuf> {
        self.inner
            .log_dir
            .as_ref()
            .map(|dir| dir.join(format!("{session}.jsonl")))
    }

    fn session(&self, session: &SessionId) -> Arc<Mutex<SessionHistory>> {
        lock(&self.inner.sessions)
            .entry(session.clone())
            .or_default()
            .clone()
    }

    fn existing(&self, session: &SessionId) -> Option<Arc<Mutex<SessionHistory>>> {
        lock(&self.inner.sessions).get(session).cloned()
    }

    pub fn contains(&self, session: &SessionId) -> bool {
        self.existing(session).is_some()
    }

    /// Creates the session if needed.
    pub fn open(&self, session: &SessionId) {
        self.session(session);
    }

    /// The seq the next appended message will receive.
    pub fn next_seq(&self, session: &SessionId) -> Result<u64, HistoryError> {
        let state = self
            .existing(session)
            .ok_or_else(|| HistoryError::UnknownSession(session.clone()))?;
        let seq = lock(&state).next_seq();
        Ok(seq)
    }

    /// Assigns the next seq, stores the message and writes one log line.
    ///
    /// On `LogWrite` failure the message is still stored; it is returned by
    /// [`HistoryStore::last_n`] like any other.
    #[allow(clippy::result_large_err)]
    pub fn append(&self, message: NewMessage) -> Result<ChatMessage, (ChatMessage, HistoryError)> {
        let state = self.session(&message.session);
        let mut state = lock(&state);
        let stored = ChatMessage {
            seq: state.next_seq(),
            session: message.session,
            sender: message.sender,
            role: message.role,
            text: message.text,
            ts: message.ts,
        };
        state.messages.push(stored.clone());
        let log_seq = state.take_log_seq();
        let written_at = stored.ts;
        match self.write_line(
            &stored.session,
            log_seq,
            LogRecord::Chat(stored.clone()),
            written_at,
        ) {
            Ok(()) => Ok(stored),
            Err(e) => Err((stored, e)),
        }
    }

    /// Records a state update; returns its log seq.
    pub fn log_state(&self, update: &ActivityStateUpdate) -> Result<u64, (u64, HistoryError)> {
        let state = self.session(&update.session);
        let mut state = lock(&state);
        let log_seq = state.take_log_seq();
        state.updates.push((log_seq, update.clone()));
        self.write_line(
            &update.session,
            log_seq,
            LogRecord::State(update.clone()),
            update.ts,
        )
        .map(|()| log_seq)
        .map_err(|e| (log_seq, e))
    }

    /// Records a delivered command or other non-chat action; returns its log seq.
    pub fn log_action(&self, action: OutboundAction, now: u64) -> Result<u64, (u64, HistoryError)> {
        let state = self.session(&action.session);
        let mut state = lock(&state);
        let log_seq = state.take_log_seq();
        let session = action.session.clone();
        let action = OutboundAction {
            emitted_seq: log_seq,
            ..action
        };
        self.write_line(&session, log_seq, LogRecord::Action(action), now)
            .map(|()| log_seq)
            .map_err(|e| (log_seq, e))
    }

    fn write_line(
        &self,
        session: &SessionId,
        seq: u64,
        record: LogRecord,
        written_at: u64,
    ) -> Result<(), HistoryError> {
        let Some(path) = self.log_path(session) else {
            return Ok(());
        };
        let line = serde_json::to_string(&SessionLogRecord {
            seq,
            record,
            written_at,
        })
        .expect("log records always serialize");
        let write = || -> io::Result<()> {
            let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
            file.write_all(format!("{line}\n").as_bytes())
        };
        write().map_err(|source| HistoryError::LogWrite {
            path: path.clone(),
            log_seq: seq,
            source,
        })
    }

    /// The `min(n, stored)` most recent messages, oldest first.
    pub fn last_n(&self, session: &SessionId, n: usize) -> Vec<ChatMessage> {
        let Some(state) = self.existing(session) else {
            return Vec::new();
        };
        let state = lock(&state);
        let start = state.messages.len().saturating_sub(n);
        state.messages[start..].to_vec()
    }

    pub fn messages(&self, session: &SessionId) -> Vec<ChatMessage> {
        self.existing(session)
            .map(|s| lock(&s).messages.clone())
            .unwrap_or_default()
    }

    pub fn message(&self, session: &SessionId, seq: u64) -> Option<ChatMessage> {
        let state = self.existing(session)?;
        let state = lock(&state);
        state.messages.get(seq as usize).cloned()
    }

    pub fn update(&self, session: &SessionId, log_seq: u64) -> Option<ActivityStateUpdate> {
        let state = self.existing(session)?;
        let state = lock(&state);
        state
            .updates
            .iter()
            .find(|(seq, _)| *seq == log_seq)
            .map(|(_, u)| u.clone())
    }
}

/// Reads every record of a session log, stopping at the first bad line.
pub fn replay_log(path: impl AsRef<Path>) -> Result<Vec<SessionLogRecord>, ReplayError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| ReplayError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut records = Vec::new();
    for (index, line) in BufReader::new(file).lines().enumerate() {
        let line_no = index + 1;
        let line = line.map_err(|e| ReplayError::CorruptLine {
            line: line_no,
            reason: e.to_string(),
        })?;
        let record: SessionLogRecord =
            serde_json::from_str(&line).map_err(|e| ReplayError::CorruptLine {
                line: line_no,
                reason: e.to_string(),
            })?;
        records.push(record);
    }
    Ok(records)
}

/// The chat messages of a replayed log, in log order.
pub fn chat_history(records: &[SessionLogRecord]) -> Vec<ChatMessage> {
    records
        .iter()
        .filter_map(|r| match &r.record {
            LogRecord::Chat(m) => Some(m.clone()),
            _ => None,
        })
        .collect()
}
