//! JSON text frames exchanged with WebSocket clients.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::domain::{ChatMessage, Payload, Role};

/// Frame sent by a client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientFrame {
    Join {
        session: String,
        name: String,
    },
    Chat {
        text: String,
    },
    State {
        kind: String,
        #[serde(default)]
        payload: Payload,
    },
}

/// Frame sent by the server.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerFrame {
    Welcome {
        participant_id: String,
        /// Only `Chat` frames.
        history: Vec<ServerFrame>,
    },
    Chat {
        sender: String,
        role: Role,
        seq: u64,
        text: String,
        ts: u64,
    },
    Presence {
        event: PresenceEvent,
        name: String,
        ts: u64,
    },
    Command {
        name: String,
        payload: Payload,
        ts: u64,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PresenceEvent {
    Join,
    Leave,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    UnknownType,
    BadFrame,
    BadName,
    BadSession,
    DuplicateJoin,
    NotJoined,
    EmptyMessage,
    TooLong,
    MalformedUpdate,
}

impl ServerFrame {
    pub fn chat(message: &ChatMessage) -> Self {
        ServerFrame::Chat {
            sender: message.sender.clone(),
            role: message.role,
            seq: message.seq,
            text: message.text.clone(),
            ts: message.ts,
        }
    }

    pub fn welcome(participant_id: &str, history: &[ChatMessage]) -> Self {
        ServerFrame::Welcome {
            participant_id: participant_id.to_string(),
            history: history.iter().map(ServerFrame::chat).collect(),
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        ServerFrame::Error {
            code,
            detail: detail.into(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server frames always serialize")
    }
}

const CLIENT_TYPES: [&str; 3] = ["join", "chat", "state"];

/// Parses one client text frame, classifying failures into wire error codes.
pub fn parse_client_frame(text: &str) -> Result<ClientFrame, ServerFrame> {
    let value: Value = serde_json::from_str(text)
        .map_err(|e| ServerFrame::error(ErrorCode::BadFrame, format!("invalid JSON: {e}")))?;
    let kind = value.get("type").and_then(Value::as_str);
    match kind {
        Some(k) if CLIENT_TYPES.contains(&k) => serde_json::from_value(value)
            .map_err(|e| ServerFrame::error(ErrorCode::BadFrame, e.to_string())),
        Some(k) => Err(ServerFrame::error(
            ErrorCode::UnknownType,
            format!("unknown frame type {k:?}"),
        )),
        None => Err(ServerFrame::error(
            ErrorCode::UnknownType,
            "frame has no string \"type\" field",
        )),
    }
}

/// Removes every `ts` field, recursively. Used when comparing captured frames.
pub fn strip_timestamps(value: &mut Value) {
    match value {
        Value::Object(map) => {
            map.remove("ts");
            map.values_mut().for_each(strip_timestamps);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_timestamps),
        _ => {}
    }
}
