/**
 * Node TCP transport: connects the steering client straight to the
 * service's socket. Used by the test harness and by any Node-hosted
 * viewer; browser builds import transport.ts instead.
 */

import net from "node:net";

import type { Transport } from "./client.js";

export class NodeTcpTransport implements Transport {
  private dataCb: ((chunk: Uint8Array) => void) | null = null;
  private closeCb: (() => void) | null = null;
  private readonly socket: net.Socket;

  private constructor(socket: net.Socket) {
    this.socket = socket;
    socket.on("data", (chunk: Buffer) => this.dataCb?.(new Uint8Array(chunk)));
    socket.on("close", () => this.closeCb?.());
    socket.on("error", () => this.closeCb?.());
  }

  static connect(host: string, port: number, timeoutMs = 5000): Promise<NodeTcpTransport> {
    return new Promise((resolve, reject) => {
      const socket = net.createConnection({ host, port, noDelay: true });
      const timer = setTimeout(() => {
        socket.destroy();
        reject(new Error(`connect timeout to ${host}:${port}`));
      }, timeoutMs);
      socket.once("connect", () => {
        clearTimeout(timer);
        resolve(new NodeTcpTransport(socket));
      });
      socket.once("error", (err) => {
        clearTimeout(timer);
        reject(err);
      });
    });
  }

  send(data: Uint8Array): void {
    this.socket.write(data);
  }

  close(): void {
    this.socket.destroy();
  }

  onData(cb: (chunk: Uint8Array) => void): void {
    this.dataCb = cb;
  }

  onClose(cb: () => void): void {
    this.closeCb = cb;
  }
}
