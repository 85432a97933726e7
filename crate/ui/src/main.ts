// Page entry: canvas, websocket session and per-tick input.

import { hudLines } from "./hud.js";
import { MouseLook, keysFromPressed } from "./input.js";
import { decodeFrame, parseServerMsg, type ClientMsg } from "./protocol.js";
import { ClientState } from "./state.js";

const params = new URLSearchParams(location.search);
const seed = Number(params.get("seed") ?? Math.floor(Math.random() * 1e6));
const debug = params.has("debug") && params.get("debug") !== "0";
const tickMs = Number(params.get("tick") ?? 80);

const canvas = document.getElementById("view") as HTMLCanvasElement;
const hud = document.getElementById("hud") as HTMLPreElement;
const ctx = canvas.getContext("2d")!;
ctx.imageSmoothingEnabled = false;
const scratch = document.createElement("canvas");
const scratchCtx = scratch.getContext("2d")!;

const state = new ClientState();
const look = new MouseLook();
const ws = new WebSocket(`${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/session`);
ws.binaryType = "arraybuffer";

const send = (msg: ClientMsg) => ws.send(JSON.stringify(msg));

ws.onopen = () => send({ type: "init", seed });
ws.onclose = () => (state.status = state.status === "error" ? "error" : "closed");
ws.onmessage = (ev) => {
  if (ev.data instanceof ArrayBuffer) {
    const r = decodeFrame(ev.data);
    if (!r.ok) {
      console.error(`frame dropped: ${r.error}`);
      return;
    }
    if (state.acceptFrame(r.frame.index, performance.now())) draw(r.frame.width, r.frame.height, r.frame.rgb);
    return;
  }
  const msg = parseServerMsg(ev.data as string);
  if (!msg) {
    console.error("unparseable message", ev.data);
    return;
  }
  switch (msg.type) {
    case "ready":
      state.status = "ready";
      state.session = msg.session;
      break;
    case "stats":
      state.onStats(msg);
      break;
    case "lag":
      state.lags++;
      break;
    case "error":
      console.error(`server error: ${msg.code}`);
      if (msg.code === "bad_init") state.status = "error";
      break;
  }
};

function draw(w: number, h: number, rgb: Uint8Array) {
  if (scratch.width !== w || scratch.height !== h) {
    scratch.width = w;
    scratch.height = h;
  }
  const img = scratchCtx.createImageData(w, h);
  for (let i = 0, j = 0; i < rgb.length; i += 3, j += 4) {
    img.data[j] = rgb[i];
    img.data[j + 1] = rgb[i + 1];
    img.data[j + 2] = rgb[i + 2];
    img.data[j + 3] = 255;
  }
  scratchCtx.putImageData(img, 0, 0);
  ctx.imageSmoothingEnabled = false;
  ctx.drawImage(scratch, 0, 0, canvas.width, canvas.height);
}

addEventListener("keydown", (e) => state.pressed.add(e.code));
addEventListener("keyup", (e) => state.pressed.delete(e.code));
addEventListener("blur", () => state.pressed.clear());
canvas.addEventListener("click", () => canvas.requestPointerLock?.());
addEventListener("mousemove", (e) => {
  if (document.pointerLockElement === canvas) look.move(e.movementX);
});

setInterval(() => {
  if (state.status !== "ready") return;
  const tick = state.tick;
  if (state.markSent(tick, performance.now())) send({ type: "action", keys: keysFromPressed(state.pressed, look.take()), tick });
  state.tick = tick + 1;
}, tickMs);

function frame() {
  hud.textContent = [`${state.status}${state.session !== null ? ` #${state.session}` : ""} seed ${seed}`, ...hudLines(state, debug)].join("\n");
  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);
