/**
 * Byte transports for the steering client.
 *
 * The client only needs an ordered byte pipe. In a browser that is a
 * WebSocket carrying binary messages (any ws-to-tcp pipe works, since the
 * payload is exactly the service's wire bytes); under Node it is a plain
 * TCP socket, provided in transport_node.ts to keep this module free of
 * Node imports.
 */

import type { Transport } from "./client.js";

export class WebSocketTransport implements Transport {
  private dataCb: ((chunk: Uint8Array) => void) | null = null;
  private closeCb: (() => void) | null = null;

  constructor(private readonly ws: WebSocket) {
    ws.binaryType = "arraybuffer";
    ws.onmessage = (ev) => {
      if (ev.data instanceof ArrayBuffer) {
        this.dataCb?.(new Uint8Array(ev.data));
      }
    };
    ws.onclose = () => this.closeCb?.();
    ws.onerror = () => this.closeCb?.();
  }

  send(data: Uint8Array): void {
    this.ws.send(data);
  }

  close(): void {
    this.ws.close();
  }

  onData(cb: (chunk: Uint8Array) => void): void {
    this.dataCb = cb;
  }

  onClose(cb: () => void): void {
    this.closeCb = cb;
  }
}
