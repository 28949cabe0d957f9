/**
 * Viewer state: one store that everything renders from.
 *
 * The invariants the store enforces are the ones the UI promises: frame
 * indices only move forward (stale or duplicated frames are dropped, not
 * drawn), the fps estimate is never negative, and the buffer snapshot
 * carries its age so the gauge can gray out stale data.
 */

import type { FrameMessage } from "./protocol.js";

export type Connection = "connecting" | "connected" | "disconnected";

export interface TauSnapshot {
  tau: number[];
  microStep: number;
  microCounter: number;
  activeClass: number;
  framesEmitted: number;
  running: boolean;
  atMs: number;
}

export interface SchemeInfo {
  K: number;
  N: number;
  c: number;
  s: number;
}

export interface ViewerState {
  connection: Connection;
  streamId: number | null;
  width: number;
  height: number;
  scheme: SchemeInfo | null;
  lastFrameIndex: number | null;
  framesDrawn: number;
  droppedFrames: number;
  fps: number;
  activeClass: number | null;
  snapshot: TauSnapshot | null;
  badMessages: number;
  /** Decoder-level damage (resyncs), mirrored from StreamDecoder. */
  decoderDamage: number;
  lastError: string | null;
  lastAppliedAt: number | null; // micro-step index from the latest prompt ack
  /** Arrival time of the previous frame, feeding the fps estimate. */
  lastFrameArrival?: number;
}

export function createViewerState(): ViewerState {
  return {
    connection: "connecting",
    streamId: null,
    width: 16,
    height: 16,
    scheme: null,
    lastFrameIndex: null,
    framesDrawn: 0,
    droppedFrames: 0,
    fps: 0,
    activeClass: null,
    snapshot: null,
    badMessages: 0,
    decoderDamage: 0,
    lastError: null,
    lastAppliedAt: null,
  };
}

const FPS_SMOOTHING = 0.2;

/**
 * Account for an arriving frame. Returns true when the frame should be
 * drawn; false when it violates monotonicity and must be discarded.
 */
export function applyFrame(state: ViewerState, msg: FrameMessage, nowMs: number): boolean {
  if (state.lastFrameIndex !== null && msg.frameIndex <= state.lastFrameIndex) {
    state.droppedFrames += 1;
    return false;
  }
  if (state.lastFrameArrival !== undefined && nowMs > state.lastFrameArrival) {
    const inst = 1000 / (nowMs - state.lastFrameArrival);
    state.fps = state.fps === 0 ? inst : state.fps + FPS_SMOOTHING * (inst - state.fps);
    if (state.fps < 0) state.fps = 0;
  }
  state.lastFrameArrival = nowMs;
  state.lastFrameIndex = msg.frameIndex;
  state.framesDrawn += 1;
  state.width = msg.width;
  state.height = msg.height;
  return true;
}

/** Fold a server control record into the state. */
export function applyControl(
  state: ViewerState,
  record: Record<string, unknown>,
  nowMs: number,
): void {
  const type = record["type"];
  if (type === "hello") {
    state.connection = "connected";
    state.streamId = asNumber(record["stream_id"]);
    state.width = asNumber(record["width"]) ?? state.width;
    state.height = asNumber(record["height"]) ?? state.height;
    const scheme = record["scheme"];
    if (scheme && typeof scheme === "object") {
      const s = scheme as Record<string, unknown>;
      state.scheme = {
        K: asNumber(s["K"]) ?? 0,
        N: asNumber(s["N"]) ?? 1,
        c: asNumber(s["c"]) ?? 1,
        s: asNumber(s["s"]) ?? 1,
      };
    }
    return;
  }
  if (type === "status_reply") {
    state.snapshot = {
      tau: Array.isArray(record["tau"]) ? (record["tau"] as number[]) : [],
      microStep: asNumber(record["micro_step"]) ?? 0,
      microCounter: asNumber(record["micro_counter"]) ?? 0,
      activeClass: asNumber(record["active_class"]) ?? 0,
      framesEmitted: asNumber(record["frames_emitted"]) ?? 0,
      running: record["running"] === true,
      atMs: nowMs,
    };
    state.activeClass = state.snapshot.activeClass;
    return;
  }
  if (type === "ack") {
    const applied = asNumber(record["applied_at_micro_step"]);
    if (applied !== null) state.lastAppliedAt = applied;
    const cls = asNumber(record["class_id"]);
    if (cls !== null) state.activeClass = cls;
    return;
  }
  if (type === "error") {
    state.lastError = typeof record["reason"] === "string" ? record["reason"] : "error";
    state.badMessages += 1;
  }
}

export function markDisconnected(state: ViewerState): void {
  state.connection = "disconnected";
}

export function snapshotAgeMs(state: ViewerState, nowMs: number): number | null {
  return state.snapshot ? nowMs - state.snapshot.atMs : null;
}

function asNumber(v: unknown): number | null {
  return typeof v === "number" && Number.isFinite(v) ? v : null;
}
