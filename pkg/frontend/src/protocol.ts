// Wire protocol (version 1): JSON text frames, one envelope per frame.
// This module owns decoding and shape checks; the ViewModel owns state.

export const WIRE_VERSION = 1;

export interface Envelope {
  v: number;
  type: string;
  seq: number;
  payload: Record<string, unknown>;
}

export interface MapInfo {
  resolution: number;
  origin: [number, number];
  rows: string[];
  waypoints: Record<string, [number, number]>;
  decision_points: { name: string; x: number; y: number; radius: number }[];
}

export interface SessionInfo {
  wire_version: number;
  config_hash: string;
  map: MapInfo;
  start: [number, number, number];
  goal: string;
}

export interface PlanView {
  velocity: number[];
  poses: [number, number][];
  stop: boolean;
}

export interface Snapshot {
  sim_t: number;
  pose: [number, number, number];
  u: number[];
  goal: string;
  mode: string;
  decision_zone: string | null;
  plan: PlanView | null;
  last_tug: { direction: string; peak_t: number; peak_value: number } | null;
}

export interface SignalFrame {
  samples: [number, number, number][]; // [t, f_hat_y, accel_y]
}

export interface SessionEvent {
  kind: string;
  sim_t: number;
  [key: string]: unknown;
}

export function decode(raw: string): Envelope | null {
  let obj: unknown;
  try {
    obj = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof obj !== "object" || obj === null) return null;
  const env = obj as Record<string, unknown>;
  if (typeof env.type !== "string") return null;
  if (typeof env.seq !== "number") return null;
  if (env.payload === undefined || typeof env.payload !== "object") return null;
  return env as unknown as Envelope;
}

export function encodeTug(direction: "LEFT" | "RIGHT"): string {
  return JSON.stringify({ type: "tug_input", payload: { direction } });
}

export function encodeControl(action: string, value?: number): string {
  const payload: Record<string, unknown> = { action };
  if (value !== undefined) payload.value = value;
  return JSON.stringify({ type: "control", payload });
}
