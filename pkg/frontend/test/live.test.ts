import { spawn, type ChildProcess } from "node:child_process";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { SteeringClient } from "../src/client.js";
import { NodeTcpTransport } from "../src/transport_node.js";
import type { FrameMessage } from "../src/protocol.js";
import { centroid } from "../src/render.js";
import { buildGauge } from "../src/gauge.js";
import {
  applyControl,
  applyFrame,
  createViewerState,
  type ViewerState,
} from "../src/state.js";

const SCHEME = { K: 0, N: 8, c: 2, s: 2 };
const WIDTH = 16;
const HEIGHT = 16;
const WINDOW = 8;
const EDGE_MARGIN = 3.0;

let server: ChildProcess;
let serverLog = "";
let client: SteeringClient;
let state: ViewerState;
const frames = new Map<number, FrameMessage>();

function waitFor(
  predicate: () => boolean,
  timeoutMs: number,
  what: string,
): Promise<void> {
  return new Promise((resolve, reject) => {
    const start = Date.now();
    const tick = () => {
      if (predicate()) return resolve();
      if (Date.now() - start > timeoutMs) {
        return reject(new Error(`timed out waiting for ${what}\n${serverLog}`));
      }
      setTimeout(tick, 20);
    };
    tick();
  });
}

/** Majority-vote motion direction over a centroid track, mirroring the
 * generator-side probe: each step votes for its dominant axis when the
 * component is at least minStep pixels; the winner needs a strict
 * majority and mean magnitude of at least minMagnitude. */
function inferDirection(cents: Array<[number, number]>): string {
  const votes = { up: 0, right: 0, down: 0, left: 0 };
  const magnitudes: number[] = [];
  for (let i = 1; i < cents.length; i += 1) {
    const dy = cents[i]![0] - cents[i - 1]![0];
    const dx = cents[i]![1] - cents[i - 1]![1];
    const ay = Math.abs(dy);
    const ax = Math.abs(dx);
    if (Math.max(ay, ax) < 0.25 || ay === ax) continue;
    if (ay > ax) {
      votes[dy > 0 ? "down" : "up"] += 1;
      magnitudes.push(ay);
    } else {
      votes[dx > 0 ? "right" : "left"] += 1;
      magnitudes.push(ax);
    }
  }
  const total = votes.up + votes.right + votes.down + votes.left;
  if (total === 0) return "ambiguous";
  let winner: keyof typeof votes = "up";
  for (const d of ["right", "down", "left"] as const) {
    if (votes[d] > votes[winner]) winner = d;
  }
  if (votes[winner] * 2 <= total) return "ambiguous";
  const mean = magnitudes.reduce((a, b) => a + b, 0) / magnitudes.length;
  if (mean < 0.5) return "ambiguous";
  return winner;
}

function windowCentroids(start: number, count: number): Array<[number, number]> | null {
  const cents: Array<[number, number]> = [];
  for (let i = start; i < start + count; i += 1) {
    const f = frames.get(i);
    if (!f) return null;
    const c = centroid(f);
    if (!c) return null;
    cents.push(c);
  }
  return cents;
}

function touchesWall(cents: Array<[number, number]>, axis: 0 | 1): boolean {
  const extent = axis === 0 ? HEIGHT : WIDTH;
  return cents.some(
    (c) => c[axis] <= EDGE_MARGIN || c[axis] >= extent - 1 - EDGE_MARGIN,
  );
}

/** True when the track reads as the wanted direction, accepting the exact
 * opposite when the window shows wall contact on that axis (a bounce). */
function matchesDirection(
  cents: Array<[number, number]>,
  want: "up" | "right",
): boolean {
  const got = inferDirection(cents);
  if (got === want) return true;
  const opposite = want === "up" ? "down" : "left";
  const axis = want === "up" ? 0 : 1;
  return got === opposite && touchesWall(cents, axis);
}

beforeAll(async () => {
  server = spawn(
    "python3",
    [
      "-m",
      "bufferflow.cli",
      "stream",
      "--oracle",
      "sprite",
      "--scheme",
      `${SCHEME.K},${SCHEME.N},${SCHEME.c},${SCHEME.s}`,
      "--class-id",
      "2",
      "--seed",
      "3",
      "--fps",
      "200",
      "--bind",
      "127.0.0.1:0",
    ],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  let address: { host: string; port: number } | null = null;
  server.stdout!.on("data", (chunk: Buffer) => {
    serverLog += chunk.toString();
    const m = serverLog.match(/serving on ([\d.]+):(\d+)/);
    if (m) address = { host: m[1]!, port: Number(m[2]!) };
  });
  server.stderr!.on("data", (chunk: Buffer) => {
    serverLog += chunk.toString();
  });
  await waitFor(() => address !== null, 60_000, "server address line");

  const transport = await NodeTcpTransport.connect(
    address!.host,
    address!.port,
    10_000,
  );
  state = createViewerState();
  client = new SteeringClient(transport, {
    onFrame: (msg) => {
      frames.set(msg.frameIndex, msg);
      applyFrame(state, msg, Date.now());
    },
    onRecord: (record) => applyControl(state, record, Date.now()),
  });
}, 90_000);

afterAll(() => {
  client?.close();
  server?.kill("SIGTERM");
});

describe("live steering console", () => {
  it("receives hello with the stream geometry", async () => {
    const hello = await client.waitHello(30_000);
    expect(hello["type"]).toBe("hello");
    expect(hello["width"]).toBe(WIDTH);
    expect(hello["height"]).toBe(HEIGHT);
    expect(hello["scheme"]).toEqual(SCHEME);
    expect(state.scheme).toEqual(SCHEME);
  }, 40_000);

  it("starts the stream and draws monotone frames", async () => {
    const ack = await client.start(30_000);
    expect(ack["type"]).toBe("ack");
    await waitFor(
      () => (state.lastFrameIndex ?? -1) >= 40,
      60_000,
      "first 40 frames",
    );
    expect(state.droppedFrames).toBe(0);
    expect(state.framesDrawn).toBeGreaterThanOrEqual(40);
  }, 90_000);

  it("flips the sprite direction within two chunks of the prompt", async () => {
    // Steer right -> up. The ack carries the frame count at the moment the
    // swap landed; frames past it must read as vertical motion within two
    // chunk emissions.
    const ack = await client.prompt(1, 30_000);
    expect(ack["type"]).toBe("ack");
    const applied = ack["frames_emitted"];
    expect(typeof applied).toBe("number");
    const appliedAt = applied as number;
    expect(state.lastAppliedAt).toBe(ack["applied_at_micro_step"]);

    await waitFor(
      () => (state.lastFrameIndex ?? -1) >= appliedAt + 2 * SCHEME.c + WINDOW + 4,
      90_000,
      "frames past the switch",
    );

    // Before the switch the probe reads horizontal motion.
    if (appliedAt >= WINDOW + 1) {
      const pre = windowCentroids(appliedAt - WINDOW - 1, WINDOW);
      expect(pre).not.toBeNull();
      expect(matchesDirection(pre!, "right")).toBe(true);
    }

    // The flip must show in a window starting within two chunks.
    let flippedAt = -1;
    for (let off = 0; off <= 2 * SCHEME.c; off += 1) {
      const cents = windowCentroids(appliedAt + off, WINDOW);
      if (cents && matchesDirection(cents, "up")) {
        flippedAt = off;
        break;
      }
    }
    expect(flippedAt).toBeGreaterThanOrEqual(0);
    expect(flippedAt).toBeLessThanOrEqual(2 * SCHEME.c);
  }, 120_000);

  it("acknowledges a rapid double prompt in order", async () => {
    const first = client.prompt(4, 30_000);
    const second = client.prompt(3, 30_000);
    const [a, b] = await Promise.all([first, second]);
    expect(a["type"]).toBe("ack");
    expect(b["type"]).toBe("ack");
    expect((b["seq"] as number) - (a["seq"] as number)).toBe(1);
    expect(b["frames_emitted"] as number).toBeGreaterThanOrEqual(
      a["frames_emitted"] as number,
    );
    const status = await client.status(30_000);
    expect(status["active_class"]).toBe(3);
  }, 60_000);

  it("builds a gauge that matches the status tau snapshot exactly", async () => {
    const status = await client.status(30_000);
    expect(status["type"]).toBe("status_reply");
    const tau = status["tau"] as number[];
    expect(tau).toHaveLength(SCHEME.K + SCHEME.N * SCHEME.c);

    const model = buildGauge(state.snapshot, state.scheme, Date.now());
    expect(model).not.toBeNull();
    expect(model!.malformed).toBe(false);
    expect(model!.stale).toBe(false);
    expect(model!.bars).toHaveLength(SCHEME.K + SCHEME.N);
    // Snapshot in state is the same reply the socket carried; levels must
    // be the exact tau values, one bar per chunk.
    expect(state.snapshot!.tau).toEqual(tau);
    const expected = Array.from(
      { length: SCHEME.N },
      (_, j) => tau[SCHEME.K + j * SCHEME.c]!,
    );
    expect(model!.bars.map((bar) => bar.level)).toEqual(expected);
    expect(model!.microCounter).toBe(status["micro_counter"]);
    expect(state.snapshot!.framesEmitted).toBe(status["frames_emitted"]);
  }, 60_000);

  it("keeps the frame index gapless across the whole session", () => {
    const indices = [...frames.keys()].sort((x, y) => x - y);
    expect(indices[0]).toBe(0);
    expect(indices[indices.length - 1]).toBe(indices.length - 1);
    expect(state.droppedFrames).toBe(0);
  });
});
