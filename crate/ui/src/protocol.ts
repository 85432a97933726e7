// Session wire format shared with the server.

export const KEY_FORWARD = 1;
export const KEY_BACK = 1 << 1;
export const KEY_STRAFE_LEFT = 1 << 2;
export const KEY_STRAFE_RIGHT = 1 << 3;
export const KEY_TURN_LEFT = 1 << 4;
export const KEY_TURN_RIGHT = 1 << 5;

export const FRAME_MAGIC = "WPLY";
export const FRAME_VERSION = 1;
export const FORMAT_RGB8 = 0;
export const FRAME_HEADER_LEN = 18;

export interface DecodedFrame {
  index: bigint;
  width: number;
  height: number;
  rgb: Uint8Array;
}

export interface ChunkStats {
  type: "stats";
  chunk: number;
  first_frame: number;
  ticks: number[];
  keys: number[];
  poses: number[][];
  chunk_ms: number;
  fps: number;
  temporal: number[];
  spatial: number[];
  positions: number[];
  dropped: number;
}

export type ServerMsg =
  | { type: "ready"; session: number; w: number; h: number }
  | ChunkStats
  | { type: "lag" }
  | { type: "error"; code: string };

export type ClientMsg =
  | { type: "init"; seed: number }
  | { type: "action"; keys: number; tick: number }
  | { type: "close" };

export type DecodeResult = { ok: true; frame: DecodedFrame } | { ok: false; error: string };

export function decodeFrame(buf: ArrayBuffer): DecodeResult {
  if (buf.byteLength < FRAME_HEADER_LEN) {
    return { ok: false, error: `short frame (${buf.byteLength} bytes)` };
  }
  const view = new DataView(buf);
  const magic = String.fromCharCode(view.getUint8(0), view.getUint8(1), view.getUint8(2), view.getUint8(3));
  if (magic !== FRAME_MAGIC) {
    return { ok: false, error: `bad magic ${JSON.stringify(magic)}` };
  }
  const version = view.getUint8(4);
  if (version !== FRAME_VERSION) {
    return { ok: false, error: `unsupported version ${version}` };
  }
  const index = view.getBigUint64(5, true);
  const width = view.getUint16(13, true);
  const height = view.getUint16(15, true);
  const format = view.getUint8(17);
  if (format !== FORMAT_RGB8) {
    return { ok: false, error: `unsupported format ${format}` };
  }
  const rgb = new Uint8Array(buf, FRAME_HEADER_LEN);
  if (rgb.length !== width * height * 3) {
    return { ok: false, error: `payload ${rgb.length} bytes for ${width}x${height}` };
  }
  return { ok: true, frame: { index, width, height, rgb } };
}

export function encodeFrame(index: bigint, width: number, height: number, rgb: Uint8Array): ArrayBuffer {
  const buf = new ArrayBuffer(FRAME_HEADER_LEN + rgb.length);
  const view = new DataView(buf);
  for (let i = 0; i < 4; i++) view.setUint8(i, FRAME_MAGIC.charCodeAt(i));
  view.setUint8(4, FRAME_VERSION);
  view.setBigUint64(5, index, true);
  view.setUint16(13, width, true);
  view.setUint16(15, height, true);
  view.setUint8(17, FORMAT_RGB8);
  new Uint8Array(buf, FRAME_HEADER_LEN).set(rgb);
  return buf;
}

export function parseServerMsg(text: string): ServerMsg | null {
  try {
    const msg = JSON.parse(text);
    return typeof msg?.type === "string" ? (msg as ServerMsg) : null;
  } catch {
    return null;
  }
}
