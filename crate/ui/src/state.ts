// Client state shared by the network, input and render callbacks.

import type { ChunkStats } from "./protocol.js";

export const LATENCY_RING = 120;

export type Status = "connecting" | "ready" | "closed" | "error";

export class LatencyRing {
  private buf: number[] = [];
  private next = 0;

  constructor(readonly capacity = LATENCY_RING) {}

  push(ms: number): void {
    if (this.buf.length < this.capacity) this.buf.push(ms);
    else this.buf[this.next] = ms;
    this.next = (this.next + 1) % this.capacity;
  }

  values(): number[] {
    return this.buf.slice();
  }

  percentile(p: number): number | null {
    return percentile(this.buf, p);
  }
}

/// Nearest-rank percentile.
export function percentile(values: number[], p: number): number | null {
  if (values.length === 0) return null;
  const sorted = values.slice().sort((a, b) => a - b);
  const rank = Math.max(1, Math.ceil((p / 100) * sorted.length));
  return sorted[rank - 1];
}

export class ClientState {
  status: Status = "connecting";
  session: number | null = null;
  pressed = new Set<string>();
  tick = 0;
  latencies = new LatencyRing();
  lastStats: ChunkStats | null = null;
  lastIndex: bigint | null = null;
  dropped = 0;
  lags = 0;
  private sentAt = new Map<number, number>();
  private lastSentTick = -1;

  /// Record an action send; at most one per tick.
  markSent(tick: number, now: number): boolean {
    if (tick <= this.lastSentTick) return false;
    this.lastSentTick = tick;
    this.sentAt.set(tick, now);
    return true;
  }

  /// Accept a frame for display when it is newer than the last one shown.
  acceptFrame(index: bigint, now: number): boolean {
    if (this.lastIndex !== null && index <= this.lastIndex) {
      this.dropped++;
      return false;
    }
    this.lastIndex = index;
    // frame 4 + t shows the effect of tick t
    const tick = Number(index) - 4;
    const sent = this.sentAt.get(tick);
    if (sent !== undefined) {
      this.latencies.push(now - sent);
      this.sentAt.delete(tick);
    }
    for (const t of this.sentAt.keys()) if (t < tick) this.sentAt.delete(t);
    return true;
  }

  onStats(stats: ChunkStats): void {
    this.lastStats = stats;
    const last = stats.ticks.at(-1);
    if (last !== undefined && last + 1 > this.tick) this.tick = last + 1;
  }
}
