//! HTTP and websocket front end.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::get;
use axum::serve::ListenerExt;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use wm_core::world::DiscreteAction;
use wm_core::Model;

use crate::protocol::{ClientMsg, ServerMsg};
use crate::session::{Outgoing, Session, SessionConfig};

const INDEX_HTML: &str = include_str!("../../../ui/index.html");
const SCRIPTS: &[(&str, &str)] = &[
    ("main.js", include_str!("../../../ui/dist/main.js")),
    ("protocol.js", include_str!("../../../ui/dist/protocol.js")),
    ("input.js", include_str!("../../../ui/dist/input.js")),
    ("state.js", include_str!("../../../ui/dist/state.js")),
    ("hud.js", include_str!("../../../ui/dist/hud.js")),
];

#[derive(Debug, Clone, Default)]
pub struct ServerConfig {
    pub session: SessionConfig,
    /// Socket send buffer for accepted connections; the OS default when `None`.
    pub send_buffer: Option<usize>,
}

impl ServerConfig {
    pub fn with_tick_ms(ms: u64) -> Self {
        Self { session: SessionConfig { tick: Duration::from_millis(ms), ..SessionConfig::default() }, send_buffer: None }
    }
}

#[derive(Clone)]
struct AppState {
    model: Arc<Model>,
    session: SessionConfig,
    next_id: Arc<AtomicU64>,
}

pub fn router(model: Arc<Model>, cfg: &ServerConfig) -> Router {
    let state = AppState { model, session: cfg.session.clone(), next_id: Arc::new(AtomicU64::new(1)) };
    Router::new()
        .route("/", get(|| async { Html(INDEX_HTML) }))
        .route("/js/{name}", get(script))
        .route("/session", get(session_ws))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: TcpListener, model: Arc<Model>, cfg: ServerConfig) -> std::io::Result<()> {
    let app = router(model, &cfg);
    let send_buffer = cfg.send_buffer;
    let listener = listener.tap_io(move |tcp| {
        let _ = tcp.set_nodelay(true);
        if let Some(n) = send_buffer {
            let _ = socket2::SockRef::from(&*tcp).set_send_buffer_size(n);
        }
    });
    axum::serve(listener, app).await
}

/// Bind `addr` and serve in the background; returns the bound address.
pub async fn spawn(addr: &str, model: Arc<Model>, cfg: ServerConfig) -> std::io::Result<SocketAddr> {
    let listener = TcpListener::bind(addr).await?;
    let local = listener.local_addr()?;
    tokio::spawn(async move {
        if let Err(e) = serve(listener, model, cfg).await {
            eprintln!("server: {e}");
        }
    });
    Ok(local)
}

async fn script(Path(name): Path<String>) -> Response {
    match SCRIPTS.iter().find(|(n, _)| *n == name) {
        Some((_, body)) => ([(header::CONTENT_TYPE, "text/javascript")], *body).into_response(),
        None => StatusCode::NOT_FOUND.into_response(),
    }
}

async fn session_ws(ws: WebSocketUpgrade, State(state): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| handle_socket(socket, state)).into_response()
}

fn text(msg: &ServerMsg) -> Message {
    Message::Text(msg.to_json().into())
}

async fn handle_socket(socket: WebSocket, state: AppState) {
    let (mut sink, mut stream) = socket.split();
    let seed = loop {
        let Some(Ok(msg)) = stream.next().await else { return };
        let parsed = match msg {
            Message::Text(t) => serde_json::from_str::<ClientMsg>(&t).ok(),
            Message::Binary(_) => None,
            Message::Close(_) => return,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        match parsed {
            Some(ClientMsg::Init { seed }) => break seed,
            Some(ClientMsg::Action { .. }) => {
                if sink.send(text(&ServerMsg::error("unknown_session"))).await.is_err() {
                    return;
                }
            }
            Some(ClientMsg::Close) => return,
            None => {
                let _ = sink.send(text(&ServerMsg::error("bad_init"))).await;
                let _ = sink.close().await;
                return;
            }
        }
    };

    let id = state.next_id.fetch_add(1, Ordering::Relaxed);
    let (w, h) = (state.model.cfg.frame_width as u16, state.model.cfg.frame_height as u16);
    if sink.send(text(&ServerMsg::Ready { session: id, w, h })).await.is_err() {
        return;
    }
    let mut session = Session::spawn(id, seed, state.model.clone(), state.session.clone());
    let outbox = session.outbox.clone();
    let writer = tokio::spawn(async move {
        while let Some(item) = outbox.next().await {
            let msg = match item {
                Outgoing::Frame(b) => Message::Binary(b.into()),
                Outgoing::Text(s) => Message::Text(s.into()),
            };
            if sink.send(msg).await.is_err() {
                return;
            }
        }
        let _ = sink.close().await;
    });

    while let Some(Ok(msg)) = stream.next().await {
        let parsed = match msg {
            Message::Text(t) => serde_json::from_str::<ClientMsg>(&t).ok(),
            Message::Binary(_) => None,
            Message::Close(_) => break,
            Message::Ping(_) | Message::Pong(_) => continue,
        };
        let reply = match parsed {
            Some(ClientMsg::Action { keys, tick }) if keys <= DiscreteAction::ALL_BITS => {
                session.inbox.push(tick, DiscreteAction(keys)).err().map(|_| "inbox_full")
            }
            Some(ClientMsg::Close) => break,
            _ => Some("bad_message"),
        };
        if let Some(code) = reply {
            session.outbox.push(Outgoing::Text(ServerMsg::error(code).to_json()));
        }
    }

    let outbox = session.outbox.clone();
    let _ = tokio::task::spawn_blocking(move || session.stop()).await;
    outbox.close();
    writer.abort();
}
