/**
 * Buffer gauge: per-chunk noise levels as a bar model.
 *
 * The server's status snapshot reports one tau per buffer frame. Frames in
 * the same chunk share a level, so the gauge shows one bar per chunk plus
 * one pinned bar per reference frame, exactly reflecting the snapshot; the
 * gauge invents nothing. Stale snapshots (older than maxAgeMs) are flagged
 * so the view can gray them out.
 */

import type { SchemeInfo, TauSnapshot } from "./state.js";

export interface GaugeBar {
  /** Noise level in [0, 1]; 1 means clean. */
  level: number;
  /** True for pinned reference slots (always level 1). */
  isReference: boolean;
  /** First buffer index this bar covers. */
  bufferIndex: number;
  /** Frames covered by the bar (c for chunks, 1 for references). */
  span: number;
}

export interface GaugeModel {
  bars: GaugeBar[];
  microCounter: number;
  microStep: number;
  activeClass: number;
  stale: boolean;
  /** True when the tau array does not match the scheme's buffer size. */
  malformed: boolean;
}

export const DEFAULT_MAX_AGE_MS = 1500;

export function buildGauge(
  snapshot: TauSnapshot | null,
  scheme: SchemeInfo | null,
  nowMs: number,
  maxAgeMs: number = DEFAULT_MAX_AGE_MS,
): GaugeModel | null {
  if (!snapshot || !scheme) return null;
  const expected = scheme.K + scheme.N * scheme.c;
  const model: GaugeModel = {
    bars: [],
    microCounter: snapshot.microCounter,
    microStep: snapshot.microStep,
    activeClass: snapshot.activeClass,
    stale: nowMs - snapshot.atMs > maxAgeMs,
    malformed: snapshot.tau.length !== expected,
  };
  if (model.malformed) return model;
  for (let k = 0; k < scheme.K; k++) {
    model.bars.push({
      level: snapshot.tau[k] ?? 1,
      isReference: true,
      bufferIndex: k,
      span: 1,
    });
  }
  for (let j = 0; j < scheme.N; j++) {
    const start = scheme.K + j * scheme.c;
    model.bars.push({
      level: snapshot.tau[start] ?? 0,
      isReference: false,
      bufferIndex: start,
      span: scheme.c,
    });
  }
  return model;
}
