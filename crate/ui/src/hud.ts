// Heads-up overlay text.

import type { ClientState } from "./state.js";

const fmt = (v: number | null | undefined, digits = 1) => (v === null || v === undefined ? "--" : v.toFixed(digits));

export function hudLines(state: ClientState, debug: boolean): string[] {
  const s = state.lastStats;
  const lines = [
    `${fmt(s?.fps)} fps`,
    `${fmt(s?.chunk_ms)} ms/chunk`,
    `tick ${state.tick}`,
    `latency p50 ${fmt(state.latencies.percentile(50), 0)} ms p95 ${fmt(state.latencies.percentile(95), 0)} ms`,
  ];
  if (state.lags > 0) lines.push(`lag ${state.lags}`);
  if (debug) {
    lines.push(`memory temporal [${s ? s.temporal.join(", ") : "--"}]`);
    lines.push(`memory spatial [${s ? s.spatial.join(", ") : "--"}]`);
    lines.push(`positions [${s ? s.positions.join(", ") : "--"}]`);
  }
  return lines;
}
