//! Streaming session server for the interactive world model.

pub mod app;
pub mod client;
pub mod protocol;
pub mod session;

pub use app::{router, serve, spawn, ServerConfig};
pub use protocol::{decode_frame, encode_frame, ChunkStats, ClientMsg, ServerMsg};
pub use session::{Session, SessionConfig};
