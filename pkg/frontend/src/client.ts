/**
 * Steering client: the state machine between a byte transport and the UI.
 *
 * The client owns the control sequence counter, resolves request/reply
 * pairs by seq, and forwards frames and server records to callbacks. It
 * never touches generation state except by sending control records, so
 * everything the viewer shows is derivable from the wire stream alone.
 */

import { StreamDecoder, encodeControl } from "./protocol.js";
import type { FrameMessage } from "./protocol.js";

export interface Transport {
  send(data: Uint8Array): void;
  close(): void;
  onData(cb: (chunk: Uint8Array) => void): void;
  onClose(cb: () => void): void;
}

export interface ClientCallbacks {
  onFrame?: (msg: FrameMessage) => void;
  onRecord?: (record: Record<string, unknown>) => void;
  onClose?: () => void;
}

interface Waiter {
  predicate: (record: Record<string, unknown>) => boolean;
  resolve: (record: Record<string, unknown>) => void;
  reject: (err: Error) => void;
  timer: ReturnType<typeof setTimeout>;
}

export class SteeringClient {
  readonly decoder = new StreamDecoder();
  private seq = 0;
  private waiters: Waiter[] = [];
  private closed = false;

  constructor(
    private readonly transport: Transport,
    private readonly callbacks: ClientCallbacks = {},
  ) {
    transport.onData((chunk) => this.handleData(chunk));
    transport.onClose(() => {
      this.closed = true;
      for (const w of this.waiters.splice(0)) {
        clearTimeout(w.timer);
        w.reject(new Error("transport closed"));
      }
      this.callbacks.onClose?.();
    });
  }

  private handleData(chunk: Uint8Array): void {
    for (const msg of this.decoder.feed(chunk)) {
      if (msg.kind === "frame") {
        this.callbacks.onFrame?.(msg);
        continue;
      }
      this.callbacks.onRecord?.(msg.record);
      const still: Waiter[] = [];
      for (const w of this.waiters) {
        if (w.predicate(msg.record)) {
          clearTimeout(w.timer);
          w.resolve(msg.record);
        } else {
          still.push(w);
        }
      }
      this.waiters = still;
    }
  }

  waitRecord(
    predicate: (record: Record<string, unknown>) => boolean,
    timeoutMs = 5000,
  ): Promise<Record<string, unknown>> {
    if (this.closed) return Promise.reject(new Error("transport closed"));
    return new Promise((resolve, reject) => {
      const timer = setTimeout(
        () => {
          this.waiters = this.waiters.filter((w) => w.timer !== timer);
          reject(new Error("timed out waiting for a control record"));
        },
        timeoutMs,
      );
      this.waiters.push({ predicate, resolve, reject, timer });
    });
  }

  waitHello(timeoutMs = 5000): Promise<Record<string, unknown>> {
    return this.waitRecord((r) => r["type"] === "hello", timeoutMs);
  }

  private send(record: Record<string, unknown>): number {
    const seq = this.seq++;
    this.transport.send(encodeControl({ ...record, seq }));
    return seq;
  }

  /** Send a record and resolve with its seq-matched reply. */
  private request(
    record: Record<string, unknown>,
    timeoutMs = 5000,
  ): Promise<Record<string, unknown>> {
    const seq = this.send(record);
    return this.waitRecord((r) => r["seq"] === seq && r["type"] !== "hello", timeoutMs);
  }

  start(timeoutMs?: number): Promise<Record<string, unknown>> {
    return this.request({ type: "start" }, timeoutMs);
  }

  stop(timeoutMs?: number): Promise<Record<string, unknown>> {
    return this.request({ type: "stop" }, timeoutMs);
  }

  prompt(classId: number, timeoutMs?: number): Promise<Record<string, unknown>> {
    return this.request({ type: "prompt", class_id: classId }, timeoutMs);
  }

  status(timeoutMs?: number): Promise<Record<string, unknown>> {
    return this.request({ type: "status" }, timeoutMs);
  }

  close(): void {
    this.transport.close();
  }
}
