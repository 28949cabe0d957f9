/**
 * Browser shell: canvas viewer, steering buttons, and the buffer gauge.
 *
 * Connects through a WebSocket byte pipe given as ?ws=ws://host:port (any
 * relay that shuttles raw bytes to the service's TCP port works). All
 * state flows one way: wire messages fold into the ViewerState store, and
 * one animation loop renders the store to the DOM.
 */

import { SteeringClient } from "./client.js";
import { buildGauge } from "./gauge.js";
import { renderFrame } from "./render.js";
import type { FrameMessage } from "./protocol.js";
import {
  applyControl,
  applyFrame,
  createViewerState,
  markDisconnected,
} from "./state.js";
import { WebSocketTransport } from "./transport.js";

const SCALE = 32; // 16x16 -> 512x512
const STATUS_POLL_MS = 500;
const CLASS_LABELS: Record<number, string> = {
  1: "square / up",
  2: "square / right",
  3: "square / down",
  4: "square / left",
  5: "cross / up",
  6: "cross / right",
  7: "cross / down",
  8: "cross / left",
};

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function connect(): void {
  const params = new URLSearchParams(window.location.search);
  const wsUrl = params.get("ws") ?? "ws://127.0.0.1:5318";
  const state = createViewerState();
  const canvas = el<HTMLCanvasElement>("stream");
  const ctx = canvas.getContext("2d");
  if (!ctx) throw new Error("canvas 2d context unavailable");
  const overlay = el<HTMLDivElement>("overlay");
  const badge = el<HTMLDivElement>("badge");
  const gaugeBox = el<HTMLDivElement>("gauge");
  const buttons = el<HTMLDivElement>("buttons");

  let pendingFrame: FrameMessage | null = null;

  const client = new SteeringClient(new WebSocketTransport(new WebSocket(wsUrl)), {
    onFrame: (msg) => {
      if (applyFrame(state, msg, performance.now())) pendingFrame = msg;
    },
    onRecord: (record) => applyControl(state, record, performance.now()),
    onClose: () => markDisconnected(state),
  });

  for (let cls = 1; cls <= 8; cls++) {
    const btn = document.createElement("button");
    btn.textContent = CLASS_LABELS[cls] ?? String(cls);
    btn.onclick = () => {
      void client.prompt(cls).then((ack) => {
        applyControl(state, ack, performance.now());
      });
    };
    buttons.appendChild(btn);
  }
  el<HTMLButtonElement>("start").onclick = () => void client.start();
  el<HTMLButtonElement>("stop").onclick = () => void client.stop();

  void client.waitHello().then(() => client.start());

  setInterval(() => {
    if (state.connection === "connected") {
      void client.status().then((reply) => {
        applyControl(state, reply, performance.now());
      });
    }
  }, STATUS_POLL_MS);

  const draw = (): void => {
    if (pendingFrame) {
      const img = renderFrame(pendingFrame, SCALE);
      ctx.putImageData(new ImageData(img.pixels, img.width, img.height), 0, 0);
      pendingFrame = null;
    }
    overlay.textContent =
      `frame ${state.lastFrameIndex ?? "-"} | ${state.fps.toFixed(1)} fps | ` +
      `class ${state.activeClass ?? "-"} (${CLASS_LABELS[state.activeClass ?? 0] ?? "null"})` +
      (state.lastAppliedAt !== null
        ? ` | applied @ micro ${state.lastAppliedAt}`
        : "");
    badge.textContent =
      state.connection === "disconnected"
        ? "disconnected"
        : state.lastError
          ? `error: ${state.lastError}`
          : state.decoderDamage
            ? `bad messages: ${state.decoderDamage}`
            : "";
    badge.style.display = badge.textContent ? "block" : "none";

    const gauge = buildGauge(state.snapshot, state.scheme, performance.now());
    gaugeBox.classList.toggle("stale", gauge?.stale ?? true);
    gaugeBox.innerHTML = "";
    if (gauge && !gauge.malformed) {
      for (const bar of gauge.bars) {
        const div = document.createElement("div");
        div.className = bar.isReference ? "bar ref" : "bar";
        div.style.height = `${Math.round(bar.level * 100)}%`;
        div.title = `buffer[${bar.bufferIndex}] tau=${bar.level.toFixed(3)}`;
        gaugeBox.appendChild(div);
      }
      const label = document.createElement("span");
      label.className = "micro";
      label.textContent = `m=${gauge.microCounter}`;
      gaugeBox.appendChild(label);
    }
    requestAnimationFrame(draw);
  };
  requestAnimationFrame(draw);

  // Surface decoder damage through the badge without reaching into the
  // client from the draw loop.
  setInterval(() => {
    state.decoderDamage = client.decoder.badMessages;
  }, 1000);
}

connect();
