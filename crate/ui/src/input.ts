// Keyboard and mouse-look capture, folded into one key mask per tick.

import { KEY_BACK, KEY_FORWARD, KEY_STRAFE_LEFT, KEY_STRAFE_RIGHT, KEY_TURN_LEFT, KEY_TURN_RIGHT } from "./protocol.js";

export const KEY_BINDINGS: Record<string, number> = {
  KeyW: KEY_FORWARD,
  KeyS: KEY_BACK,
  KeyA: KEY_STRAFE_LEFT,
  KeyD: KEY_STRAFE_RIGHT,
  KeyQ: KEY_TURN_LEFT,
  KeyE: KEY_TURN_RIGHT,
};

export const DEG_PER_PIXEL = 0.25;
export const TURN_STEP_DEG = 15;
export const TURN_THRESHOLD_DEG = 7.5;

/// Horizontal mouse motion accumulated into discrete turns.
export class MouseLook {
  private deg = 0;

  move(dx: number): void {
    this.deg += dx * DEG_PER_PIXEL;
  }

  /// Turn bits for one tick; consumes one step of accumulated look.
  take(): number {
    if (this.deg >= TURN_THRESHOLD_DEG) {
      this.deg = Math.max(0, this.deg - TURN_STEP_DEG);
      return KEY_TURN_RIGHT;
    }
    if (this.deg <= -TURN_THRESHOLD_DEG) {
      this.deg = Math.min(0, this.deg + TURN_STEP_DEG);
      return KEY_TURN_LEFT;
    }
    return 0;
  }
}

export function keysFromPressed(pressed: Iterable<string>, look = 0): number {
  let keys = 0;
  for (const code of pressed) keys |= KEY_BINDINGS[code] ?? 0;
  keys |= look;
  // opposite keys cancel
  for (const [a, b] of [
    [KEY_FORWARD, KEY_BACK],
    [KEY_STRAFE_LEFT, KEY_STRAFE_RIGHT],
    [KEY_TURN_LEFT, KEY_TURN_RIGHT],
  ]) {
    if ((keys & a) !== 0 && (keys & b) !== 0) keys &= ~(a | b);
  }
  return keys;
}

/// Action messages for a key timeline, one per tick.
export function actionTimeline(timeline: Iterable<string>[], firstTick = 0): { type: "action"; keys: number; tick: number }[] {
  return timeline.map((pressed, i) => ({ type: "action", keys: keysFromPressed(pressed), tick: firstTick + i }));
}
