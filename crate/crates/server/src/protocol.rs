//! Session wire protocol: JSON control messages and binary WPLY frames.

use serde::{Deserialize, Serialize};
use wm_core::world::Frame;

pub const FRAME_MAGIC: &[u8; 4] = b"WPLY";
pub const FRAME_VERSION: u8 = 1;
pub const FORMAT_RGB8: u8 = 0;
/// magic ‖ version ‖ index u64 ‖ width u16 ‖ height u16 ‖ format.
pub const FRAME_HEADER_LEN: usize = 4 + 1 + 8 + 2 + 2 + 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMsg {
    Init { seed: u64 },
    Action { keys: u8, tick: u64 },
    Close,
}

/// Per-chunk report. `poses` are `[R | T]` rows of the committed poses of
/// the chunk's frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkStats {
    pub chunk: u64,
    pub first_frame: u64,
    pub ticks: Vec<u64>,
    pub keys: Vec<u8>,
    pub poses: Vec<[f64; 12]>,
    pub chunk_ms: f64,
    pub fps: f64,
    pub temporal: Vec<u64>,
    pub spatial: Vec<u64>,
    pub positions: Vec<i64>,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Ready { session: u64, w: u16, h: u16 },
    Stats(ChunkStats),
    Lag,
    Error { code: String },
}

impl ServerMsg {
    pub fn error(code: &str) -> Self {
        ServerMsg::Error { code: code.to_string() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FrameError {
    #[error("frame shorter than its header ({0} bytes)")]
    Short(usize),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unsupported pixel format {0}")]
    Format(u8),
    #[error("payload of {got} bytes for a {w}×{h} RGB8 frame")]
    Payload { got: usize, w: u16, h: u16 },
}

pub fn encode_frame(index: u64, frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.rgb.len());
    out.extend_from_slice(FRAME_MAGIC);
    out.push(FRAME_VERSION);
    out.extend_from_slice(&index.to_le_bytes());
    out.extend_from_slice(&(frame.width as u16).to_le_bytes());
    out.extend_from_slice(&(frame.height as u16).to_le_bytes());
    out.push(FORMAT_RGB8);
    out.extend_from_slice(&frame.rgb);
    out
}

pub fn decode_frame(bytes: &[u8]) -> Result<(u64, Frame), FrameError> {
    if bytes.len() < FRAME_HEADER_LEN {
        return Err(FrameError::Short(bytes.len()));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if &magic != FRAME_MAGIC {
        return Err(FrameError::Magic(magic));
    }
    if bytes[4] != FRAME_VERSION {
        return Err(FrameError::Version(bytes[4]));
    }
    let index = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
    let w = u16::from_le_bytes([bytes[13], bytes[14]]);
    let h = u16::from_le_bytes([bytes[15], bytes[16]]);
    if bytes[17] != FORMAT_RGB8 {
        return Err(FrameError::Format(bytes[17]));
    }
    let payload = &bytes[FRAME_HEADER_LEN..];
    if payload.len() != w as usize * h as usize * 3 {
        return Err(FrameError::Payload { got: payload.len(), w, h });
    }
    Ok((index, Frame { width: w as u32, height: h as u32, rgb: payload.to_vec() }))
}
