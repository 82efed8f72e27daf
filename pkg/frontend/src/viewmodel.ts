// UI state. Renders only from received messages: there is no client-side
// physics, so a refresh rebuilds an equivalent view from session_info plus
// the next snapshot. Sequence gaps and decode failures are surfaced.

import {
  decode,
  SessionEvent,
  SessionInfo,
  Snapshot,
} from "./protocol.js";

export const SIGNAL_WINDOW_S = 4.0;
export const STALE_MS = 2000;
export const TUG_HIGHLIGHT_TIMEOUT_MS = 2000;

export interface SignalSample {
  t: number;
  force: number;
  accel: number;
}

export interface EventEntry extends SessionEvent {
  seq: number;
}

export class ViewModel {
  info: SessionInfo | null = null;
  snapshot: Snapshot | null = null;
  signals: SignalSample[] = [];
  events: EventEntry[] = [];
  warnings = 0;
  decodeFailures = 0;
  seqGaps = 0;
  lastSeq: number | null = null;
  lastSnapshotWall: number | null = null;
  tugHighlight: { direction: string; sentWall: number } | null = null;
  maxEvents = 200;

  apply(raw: string, wallNow: number): void {
    const env = decode(raw);
    if (env === null) {
      this.decodeFailures += 1;
      return;
    }
    if (env.type !== "session_info") {
      if (this.lastSeq !== null && env.seq > this.lastSeq + 1) {
        this.seqGaps += 1;
      }
      this.lastSeq = env.seq;
    }
    switch (env.type) {
      case "session_info":
        this.info = env.payload as unknown as SessionInfo;
        this.lastSeq = null;
        break;
      case "state_snapshot":
        this.snapshot = env.payload as unknown as Snapshot;
        this.lastSnapshotWall = wallNow;
        break;
      case "signal_frame": {
        const frame = env.payload as { samples?: [number, number, number][] };
        if (!Array.isArray(frame.samples)) {
          this.decodeFailures += 1;
          return;
        }
        for (const [t, force, accel] of frame.samples) {
          this.signals.push({ t, force, accel });
        }
        const horizon = this.signals.length
          ? this.signals[this.signals.length - 1].t - SIGNAL_WINDOW_S
          : 0;
        while (this.signals.length && this.signals[0].t < horizon) {
          this.signals.shift();
        }
        break;
      }
      case "event": {
        const ev = env.payload as unknown as SessionEvent;
        this.events.push({ ...ev, seq: env.seq });
        if (this.events.length > this.maxEvents) {
          this.events.shift();
        }
        if (ev.kind === "tug_detected") {
          this.tugHighlight = null;
        }
        break;
      }
      case "warning":
        this.warnings += 1;
        break;
      default:
        // unknown server types are ignored (forward compatibility)
        break;
    }
  }

  isStale(wallNow: number): boolean {
    if (this.lastSnapshotWall === null) return true;
    return wallNow - this.lastSnapshotWall > STALE_MS;
  }

  markTugSent(direction: "LEFT" | "RIGHT", wallNow: number): void {
    this.tugHighlight = { direction, sentWall: wallNow };
  }

  /** Highlight is active until tug_detected arrives or 2 s elapse. */
  activeHighlight(wallNow: number): string | null {
    if (this.tugHighlight === null) return null;
    if (wallNow - this.tugHighlight.sentWall > TUG_HIGHLIGHT_TIMEOUT_MS) {
      this.tugHighlight = null;
      return null;
    }
    return this.tugHighlight.direction;
  }

  /** Recent tug_detected markers inside the signal window, for the plots. */
  tugMarkers(): { t: number; direction: string }[] {
    if (!this.signals.length) return [];
    const t0 = this.signals[0].t;
    return this.events
      .filter((e) => e.kind === "tug_detected" && e.sim_t >= t0)
      .map((e) => ({ t: e.sim_t, direction: String(e.direction ?? "") }));
  }

  reset(): void {
    this.info = null;
    this.snapshot = null;
    this.signals = [];
    this.lastSeq = null;
    this.lastSnapshotWall = null;
    this.tugHighlight = null;
  }
}
