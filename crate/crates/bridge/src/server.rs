use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::Router;
use dissect_core::harness::{HarnessError, Scenario};
use tokio::net::TcpListener;
use tokio::sync::mpsc::{unbounded_channel, UnboundedSender};
use tracing::{debug, info, warn};

use crate::protocol::{encode, parse_client, ClientMessage, Envelope, ServerMessage, PROTOCOL_VERSION, SCHEMA};
use crate::session::BridgeSession;

#[derive(Debug, thiserror::Error)]
pub enum BridgeError {
    #[error(transparent)]
    Scenario(#[from] HarnessError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    /// Interval between WebSocket pings.
    pub heartbeat: Duration,
    /// Where closed requests are persisted.
    pub output_dir: Option<PathBuf>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            heartbeat: Duration::from_secs(15),
            output_dir: None,
        }
    }
}

type Outbox = UnboundedSender<(Option<u64>, ServerMessage)>;

enum Command {
    Connect(Outbox),
    Message { seq: u64, message: ClientMessage, out: Outbox },
    Reject { seq: Option<u64>, reason: String, out: Outbox },
}

#[derive(Clone)]
struct AppState {
    commands: mpsc::Sender<Command>,
    connected: Arc<AtomicBool>,
    heartbeat: Duration,
}

/// Clears the connection flag when the connection ends or never starts.
struct ConnectionGuard(Arc<AtomicBool>);

impl Drop for ConnectionGuard {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

pub struct Server {
    listener: TcpListener,
    app: Router,
}

impl Server {
    /// Loads the scenario, starts the owner thread and binds `addr`.
    pub async fn bind(scenario: &Scenario, addr: SocketAddr, config: ServerConfig) -> Result<Self, BridgeError> {
        let session = BridgeSession::new(scenario, config.output_dir.clone())?;
        let (tx, rx) = mpsc::channel();
        std::thread::Builder::new()
            .name("session-owner".into())
            .spawn(move || owner(session, rx))?;
        let state = AppState {
            commands: tx,
            connected: Arc::new(AtomicBool::new(false)),
            heartbeat: config.heartbeat.max(Duration::from_millis(1)),
        };
        let app = Router::new()
            .route("/session", get(upgrade))
            .route("/schema", get(schema))
            .route("/health", get(|| async { "ok" }))
            .with_state(state);
        let listener = TcpListener::bind(addr).await?;
        Ok(Self { listener, app })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub async fn run(self) -> Result<(), BridgeError> {
        axum::serve(self.listener, self.app).await?;
        Ok(())
    }
}

/// Serves `scenario` on `addr` until the process ends.
pub async fn serve(scenario: &Scenario, addr: SocketAddr, config: ServerConfig) -> Result<(), BridgeError> {
    let server = Server::bind(scenario, addr, config).await?;
    info!(addr = %server.local_addr()?, "bridge listening on /session");
    server.run().await
}

fn owner(mut session: BridgeSession, rx: mpsc::Receiver<Command>) {
    while let Ok(cmd) = rx.recv() {
        match cmd {
            Command::Connect(out) => {
                let _ = out.send((None, ServerMessage::Snapshot(session.snapshot())));
            }
            Command::Message { seq, message, out } => {
                debug!(seq, message = message.kind(), "handling");
                session.handle(message, &mut |m| {
                    let _ = out.send((Some(seq), m));
                });
            }
            Command::Reject { seq, reason, out } => {
                warn!(?seq, %reason, "rejected frame");
                let state = session.phase();
                let _ = out.send((seq, ServerMessage::Error(crate::protocol::ErrorPayload { reason, state })));
            }
        }
    }
}

async fn schema() -> Response {
    ([(header::CONTENT_TYPE, "application/schema+json")], SCHEMA).into_response()
}

async fn upgrade(State(state): State<AppState>, ws: WebSocketUpgrade) -> Response {
    if state.connected.swap(true, Ordering::SeqCst) {
        return (StatusCode::CONFLICT, "an operator is already connected").into_response();
    }
    let guard = ConnectionGuard(state.connected.clone());
    ws.on_upgrade(move |socket| async move {
        let _guard = guard;
        connection(socket, state).await;
    })
}

async fn connection(socket: WebSocket, state: AppState) {
    use futures_util::{SinkExt, StreamExt};
    info!("operator connected");
    let (mut sink, mut stream) = socket.split();
    let (out, mut outbox) = unbounded_channel::<(Option<u64>, ServerMessage)>();
    let heartbeat = state.heartbeat;
    let writer = tokio::spawn(async move {
        let mut seq = 0u64;
        let mut ticker = tokio::time::interval_at(tokio::time::Instant::now() + heartbeat, heartbeat);
        loop {
            tokio::select! {
                m = outbox.recv() => {
                    let Some((in_reply_to, message)) = m else { break };
                    seq += 1;
                    let text = encode(&Envelope { version: PROTOCOL_VERSION, seq, in_reply_to, message });
                    if sink.send(Message::Text(text.into())).await.is_err() {
                        break;
                    }
                }
                _ = ticker.tick() => {
                    if sink.send(Message::Ping(Default::default())).await.is_err() {
                        break;
                    }
                }
            }
        }
    });
    if state.commands.send(Command::Connect(out.clone())).is_err() {
        writer.abort();
        return;
    }
    let mut last_seq: Option<u64> = None;
    while let Some(frame) = stream.next().await {
        let cmd = match frame {
            Ok(Message::Text(text)) => match parse_client(text.as_str()) {
                Err(reason) => Command::Reject {
                    seq: None,
                    reason,
                    out: out.clone(),
                },
                Ok(env) if last_seq.is_some_and(|l| env.seq <= l) => Command::Reject {
                    seq: Some(env.seq),
                    reason: format!(
                        "sequence number {} does not follow {}",
                        env.seq,
                        last_seq.expect("checked")
                    ),
                    out: out.clone(),
                },
                Ok(env) => {
                    last_seq = Some(env.seq);
                    Command::Message {
                        seq: env.seq,
                        message: env.message,
                        out: out.clone(),
                    }
                }
            },
            Ok(Message::Binary(_)) => Command::Reject {
                seq: None,
                reason: "binary frames are not supported".into(),
                out: out.clone(),
            },
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        if state.commands.send(cmd).is_err() {
            break;
        }
    }
    writer.abort();
    info!("operator disconnected");
}
