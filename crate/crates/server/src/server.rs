//! The `/ws` endpoint. Each room runs on its own task, which owns the room
//! state, so membership changes and broadcasts are applied one at a time and
//! every member sees the same frame order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot};

use huddle_core::domain::{Clock, ParticipantIds, Payload, SessionId};
use huddle_core::engine::{LlmJob, PipelineConfig};
use huddle_core::gateway::{ConnId, Room};
use huddle_core::history::HistoryStore;
use huddle_core::llm::{Completion, LlmBackend, LlmError};
use huddle_core::wire::{parse_client_frame, ClientFrame, ErrorCode, ServerFrame};

/// Frames buffered per connection before it is considered stalled and closed.
pub const OUTBOUND_CAPACITY: usize = 1024;

const ROOM_INBOX: usize = 4096;

type Outbox = mpsc::Sender<String>;

enum RoomCommand {
    Join {
        conn: ConnId,
        name: String,
        outbox: Outbox,
        joined: oneshot::Sender<bool>,
    },
    Chat {
        conn: ConnId,
        text: String,
    },
    State {
        conn: ConnId,
        kind: String,
        payload: Payload,
    },
    Leave {
        conn: ConnId,
    },
    Completion {
        job: Box<LlmJob>,
        result: Result<Completion, LlmError>,
    },
}

#[derive(Clone)]
pub struct AppState {
    inner: Arc<Shared>,
}

struct Shared {
    config: Arc<PipelineConfig>,
    history: Arc<HistoryStore>,
    backend: Arc<dyn LlmBackend>,
    clock: Arc<dyn Clock>,
    ids: ParticipantIds,
    rooms: Mutex<HashMap<SessionId, mpsc::Sender<RoomCommand>>>,
    next_conn: AtomicU64,
}

impl AppState {
    pub fn new(
        config: Arc<PipelineConfig>,
        history: Arc<HistoryStore>,
        backend: Arc<dyn LlmBackend>,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Self {
            inner: Arc::new(Shared {
                config,
                history,
                backend,
                clock,
                ids: ParticipantIds::new(),
                rooms: Mutex::new(HashMap::new()),
                next_conn: AtomicU64::new(1),
            }),
        }
    }

    pub fn history(&self) -> &Arc<HistoryStore> {
        &self.inner.history
    }

    fn room(&self, session: &SessionId) -> Result<mpsc::Sender<RoomCommand>, String> {
        let mut rooms = self.inner.rooms.lock().expect("room registry lock");
        if let Some(tx) = rooms.get(session) {
            if !tx.is_closed() {
                return Ok(tx.clone());
            }
        }
        let shared = &self.inner;
        let room = Room::<f64>::new(
            session.clone(),
            shared.config.clone(),
            shared.history.clone(),
            shared.ids.clone(),
            shared.clock.now_ms(),
        )
        .map_err(|e| e.to_string())?;
        let (tx, rx) = mpsc::channel(ROOM_INBOX);
        tokio::spawn(run_room(room, rx, tx.downgrade(), self.inner.clone()));
        rooms.insert(session.clone(), tx.clone());
        tracing::info!(%session, "room opened");
        Ok(tx)
    }
}

pub fn router(state: AppState) -> Router {
    Router::new().route("/ws", get(upgrade)).with_state(state)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: TcpListener,
    state: AppState,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown)
        .await
}

async fn upgrade(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| connection(socket, state))
}

fn error_json(code: ErrorCode, detail: impl Into<String>) -> String {
    ServerFrame::error(code, detail).to_json()
}

async fn connection(socket: WebSocket, state: AppState) {
    let conn = state.inner.next_conn.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (outbox, mut rx) = mpsc::channel::<String>(OUTBOUND_CAPACITY);
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text.into())).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    let mut room: Option<mpsc::Sender<RoomCommand>> = None;
    while let Some(Ok(message)) = stream.next().await {
        let text = match message {
            Message::Text(text) => text.to_string(),
            Message::Close(_) => break,
            Message::Binary(_) => {
                let _ = outbox.try_send(error_json(
                    ErrorCode::BadFrame,
                    "binary frames are not supported",
                ));
                continue;
            }
            _ => continue,
        };
        if outbox.is_closed() {
            break;
        }
        let frame = match parse_client_frame(&text) {
            Ok(frame) => frame,
            Err(error) => {
                let _ = outbox.try_send(error.to_json());
                continue;
            }
        };
        let command = match frame {
            ClientFrame::Join { session, name } => {
                if room.is_some() {
                    let _ = outbox.try_send(error_json(
                        ErrorCode::DuplicateJoin,
                        "connection has already joined",
                    ));
                    continue;
                }
                let session = match SessionId::new(session) {
                    Ok(s) => s,
                    Err(e) => {
                        let _ = outbox.try_send(error_json(ErrorCode::BadSession, e.to_string()));
                        continue;
                    }
                };
                let tx = match state.room(&session) {
                    Ok(tx) => tx,
                    Err(e) => {
                        let _ = outbox.try_send(error_json(ErrorCode::BadSession, e));
                        continue;
                    }
                };
                let (ack, joined) = oneshot::channel();
                let join = RoomCommand::Join {
                    conn,
                    name,
                    outbox: outbox.clone(),
                    joined: ack,
                };
                if tx.send(join).await.is_ok() && joined.await.unwrap_or(false) {
                    room = Some(tx);
                }
                continue;
            }
            ClientFrame::Chat { text } => RoomCommand::Chat { conn, text },
            ClientFrame::State { kind, payload } => RoomCommand::State {
                conn,
                kind,
                payload,
            },
        };
        match &room {
            Some(tx) => {
                if tx.send(command).await.is_err() {
                    break;
                }
            }
            None => {
                let _ = outbox.try_send(error_json(ErrorCode::NotJoined, "join a session first"));
            }
        }
    }
    if let Some(tx) = room {
        let _ = tx.send(RoomCommand::Leave { conn }).await;
    }
    drop(outbox);
    let _ = writer.await;
}

struct RoomTask {
    room: Room<f64>,
    outboxes: HashMap<ConnId, Outbox>,
    inbox: mpsc::WeakSender<RoomCommand>,
    shared: Arc<Shared>,
}

impl RoomTask {
    fn now(&self) -> u64 {
        self.shared.clock.now_ms()
    }

    fn deliver(&mut self, outcome: huddle_core::gateway::Outcome) {
        let mut stalled = Vec::new();
        for delivery in &outcome.deliveries {
            let text = delivery.frame.to_json();
            for conn in self.room.recipients(delivery.target) {
                let Some(outbox) = self.outboxes.get(&conn) else {
                    continue;
                };
                if outbox.try_send(text.clone()).is_err() && !stalled.contains(&conn) {
                    stalled.push(conn);
                }
            }
        }
        self.spawn_jobs(outcome.jobs);
        for conn in stalled {
            tracing::warn!(session = %self.room.session(), conn, "outbound queue full, closing connection");
            self.outboxes.remove(&conn);
            let now = self.now();
            let leave = self.room.leave(conn, now);
            self.deliver(leave);
        }
    }

    fn spawn_jobs(&self, jobs: Vec<LlmJob>) {
        for job in jobs {
            let Some(inbox) = self.inbox.upgrade() else {
                return;
            };
            let backend = self.shared.backend.clone();
            tokio::spawn(async move {
                let result = job.run(backend.as_ref()).await;
                let _ = inbox
                    .send(RoomCommand::Completion {
                        job: Box::new(job),
                        result,
                    })
                    .await;
            });
        }
    }

    fn handle(&mut self, command: RoomCommand) {
        let now = self.now();
        let outcome = match command {
            RoomCommand::Join {
                conn,
                name,
                outbox,
                joined,
            } => {
                self.outboxes.insert(conn, outbox);
                let outcome = self.room.join(conn, &name, now);
                let ok = self.room.member(conn).is_some();
                let _ = joined.send(ok);
                if !ok {
                    // deliver the error, then forget the connection
                    self.deliver(outcome);
                    self.outboxes.remove(&conn);
                    return;
                }
                outcome
            }
            RoomCommand::Chat { conn, text } => self.room.chat(conn, &text, now),
            RoomCommand::State {
                conn,
                kind,
                payload,
            } => self.room.state(conn, &kind, payload, now),
            RoomCommand::Leave { conn } => {
                self.outboxes.remove(&conn);
                self.room.leave(conn, now)
            }
            RoomCommand::Completion { job, result } => self.room.completion(&job, result, now),
        };
        self.deliver(outcome);
    }
}

async fn run_room(
    room: Room<f64>,
    mut rx: mpsc::Receiver<RoomCommand>,
    inbox: mpsc::WeakSender<RoomCommand>,
    shared: Arc<Shared>,
) {
    let period = Duration::from_millis(shared.config.server.tick_interval_ms.max(1));
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
    let mut task = RoomTask {
        room,
        outboxes: HashMap::new(),
        inbox,
        shared,
    };
    loop {
        tokio::select! {
            command = rx.recv() => match command {
                Some(command) => task.handle(command),
                None => break,
            },
            _ = ticker.tick() => {
                let now = task.now();
                let outcome = task.room.tick(now);
                task.deliver(outcome);
            }
        }
    }
}
