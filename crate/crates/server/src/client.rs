//! Headless session client and scripted replay driver.

use std::net::SocketAddr;

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpSocket, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;
use wm_core::world::{spawn_pose, CameraPose, DiscreteAction, Frame, GridWorld, Intrinsics};

use crate::protocol::{decode_frame, ChunkStats, ClientMsg, ServerMsg};
use crate::session::advance;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error("websocket: {0}")]
    Ws(#[from] tokio_tungstenite::tungstenite::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed")]
    Closed,
    #[error("protocol: {0}")]
    Protocol(String),
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Ready { session: u64, w: u16, h: u16 },
    Frame { index: u64, frame: Frame },
    Stats(ChunkStats),
    Lag,
    Error(String),
}

pub struct Client {
    ws: WebSocketStream<TcpStream>,
    /// Messages that did not parse under the protocol.
    pub parse_errors: u64,
}

impl Client {
    pub async fn connect(addr: SocketAddr) -> Result<Self> {
        Self::connect_with(addr, None).await
    }

    /// Connect with an explicit receive buffer, which makes a slow reader
    /// exert backpressure sooner.
    pub async fn connect_with(addr: SocketAddr, recv_buffer: Option<u32>) -> Result<Self> {
        let socket = if addr.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
        if let Some(n) = recv_buffer {
            socket.set_recv_buffer_size(n)?;
        }
        let tcp = socket.connect(addr).await?;
        tcp.set_nodelay(true)?;
        let (ws, _) = tokio_tungstenite::client_async(format!("ws://{addr}/session"), tcp).await?;
        Ok(Self { ws, parse_errors: 0 })
    }

    pub async fn send(&mut self, msg: &ClientMsg) -> Result<()> {
        self.send_text(&serde_json::to_string(msg).expect("client messages serialize")).await
    }

    pub async fn send_text(&mut self, text: &str) -> Result<()> {
        Ok(self.ws.send(Message::Text(text.into())).await?)
    }

    /// Next protocol event; `None` once the server closes.
    pub async fn next_event(&mut self) -> Result<Option<Event>> {
        loop {
            let Some(msg) = self.ws.next().await else { return Ok(None) };
            match msg? {
                Message::Text(t) => match serde_json::from_str::<ServerMsg>(&t) {
                    Ok(ServerMsg::Ready { session, w, h }) => return Ok(Some(Event::Ready { session, w, h })),
                    Ok(ServerMsg::Stats(s)) => return Ok(Some(Event::Stats(s))),
                    Ok(ServerMsg::Lag) => return Ok(Some(Event::Lag)),
                    Ok(ServerMsg::Error { code }) => return Ok(Some(Event::Error(code))),
                    Err(_) => self.parse_errors += 1,
                },
                Message::Binary(b) => match decode_frame(&b) {
                    Ok((index, frame)) => return Ok(Some(Event::Frame { index, frame })),
                    Err(_) => self.parse_errors += 1,
                },
                Message::Close(_) => return Ok(None),
                _ => {}
            }
        }
    }

    /// Send init and wait for the ready message.
    pub async fn init(&mut self, seed: u64) -> Result<(u64, u16, u16)> {
        self.send(&ClientMsg::Init { seed }).await?;
        match self.next_event().await? {
            Some(Event::Ready { session, w, h }) => Ok((session, w, h)),
            Some(other) => Err(ClientError::Protocol(format!("expected ready, got {other:?}"))),
            None => Err(ClientError::Closed),
        }
    }

    pub async fn close(mut self) -> Result<()> {
        let _ = self.send(&ClientMsg::Close).await;
        let _ = self.ws.close(None).await;
        Ok(())
    }
}

/// Everything observed during a scripted session.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    pub session: u64,
    pub width: u16,
    pub height: u16,
    pub frames: Vec<(u64, Frame)>,
    pub stats: Vec<ChunkStats>,
    pub lags: u64,
    pub errors: Vec<String>,
    pub parse_errors: u64,
}

impl Transcript {
    pub fn indices_strictly_increase(&self) -> bool {
        self.frames.windows(2).all(|w| w[0].0 < w[1].0)
    }

    /// Committed poses, one per frame, in frame order.
    pub fn pose_trace(&self) -> Vec<[f64; 12]> {
        self.stats.iter().flat_map(|s| s.poses.iter().copied()).collect()
    }

    /// Keys the server applied, one per tick.
    pub fn applied_keys(&self) -> Vec<u8> {
        self.stats.iter().filter(|s| s.chunk > 0).flat_map(|s| s.keys.iter().copied()).collect()
    }
}

/// Drive a session with one action per tick, keeping at most `lead` ticks
/// queued ahead of the server, until all of `keys` were applied.
pub async fn scripted_session(addr: SocketAddr, seed: u64, keys: &[u8], lead: u64) -> Result<Transcript> {
    let mut client = Client::connect(addr).await?;
    let (session, width, height) = client.init(seed).await?;
    let mut t = Transcript { session, width, height, ..Transcript::default() };
    let total = keys.len() as u64;
    let ticks_needed = total.div_ceil(4) * 4;
    let (mut sent, mut consumed) = (0u64, 0u64);
    while consumed < ticks_needed {
        while sent < total && sent < consumed + lead {
            client.send(&ClientMsg::Action { keys: keys[sent as usize], tick: sent }).await?;
            sent += 1;
        }
        match client.next_event().await? {
            Some(Event::Frame { index, frame }) => t.frames.push((index, frame)),
            Some(Event::Stats(s)) => {
                if let Some(&last) = s.ticks.last() {
                    consumed = last + 1;
                }
                t.stats.push(s);
            }
            Some(Event::Lag) => t.lags += 1,
            Some(Event::Error(code)) => t.errors.push(code),
            Some(Event::Ready { .. }) => return Err(ClientError::Protocol("second ready".into())),
            None => return Err(ClientError::Closed),
        }
    }
    t.parse_errors = client.parse_errors;
    client.close().await?;
    Ok(t)
}

/// Offline pose trace for a key timeline: four spawn frames, then one
/// collision-checked step per tick.
pub fn replay_poses(seed: u64, world_size: usize, width: u32, height: u32, keys: &[u8]) -> Vec<CameraPose> {
    let world = GridWorld::generate_sized(seed, world_size);
    let mut pose = spawn_pose(&world, seed, Intrinsics::hfov90(width, height));
    let mut out = vec![pose; 4];
    for chunk in keys.chunks(4) {
        let k: [DiscreteAction; 4] = std::array::from_fn(|f| DiscreteAction(chunk.get(f).copied().unwrap_or(0)));
        let poses = advance(&world, &pose, &k);
        pose = poses[3];
        out.extend(poses);
    }
    out
}
