/**
 * Wire protocol decoder/encoder for the stream service.
 *
 * Two message kinds share one byte stream, distinguished by 4-byte magics:
 * frames ("SDF1") carry a 25-byte big-endian header plus an 8-bit grayscale
 * payload, controls ("SDC1") carry a u32 length plus UTF-8 JSON. The decoder
 * is incremental and resynchronizes after garbage by scanning to the next
 * plausible magic, so one corrupt header never kills the stream.
 */

export const FRAME_MAGIC = "SDF1";
export const CONTROL_MAGIC = "SDC1";
export const FRAME_HEADER_SIZE = 25;
export const CONTROL_HEADER_SIZE = 8;
export const PIXEL_FORMAT_GRAY8 = 1;

/** Upper bound on sane payload sizes; larger lengths are treated as garbage. */
const MAX_PAYLOAD = 1 << 24;

export interface FrameMessage {
  kind: "frame";
  streamId: number;
  frameIndex: number;
  width: number;
  height: number;
  pixelFormat: number;
  payload: Uint8Array;
}

export interface ControlMessage {
  kind: "control";
  record: Record<string, unknown>;
}

export type Message = FrameMessage | ControlMessage;

export class WireError extends Error {}

const encoder = new TextEncoder();
const decoder = new TextDecoder("utf-8", { fatal: true });

function magicAt(bytes: Uint8Array, offset: number): string {
  return String.fromCharCode(
    bytes[offset] ?? 0,
    bytes[offset + 1] ?? 0,
    bytes[offset + 2] ?? 0,
    bytes[offset + 3] ?? 0,
  );
}

/** Encode a client control record (start/stop/status/prompt). */
export function encodeControl(record: Record<string, unknown>): Uint8Array {
  const type = record["type"];
  if (type !== "prompt" && type !== "start" && type !== "stop" && type !== "status") {
    throw new WireError(`not a client control type: ${String(type)}`);
  }
  const seq = record["seq"];
  if (typeof seq !== "number" || !Number.isInteger(seq) || seq < 0) {
    throw new WireError("control record needs an integer seq >= 0");
  }
  if (type === "prompt" && typeof record["class_id"] !== "number") {
    throw new WireError("prompt needs a class_id");
  }
  const body = encoder.encode(JSON.stringify(record));
  const out = new Uint8Array(CONTROL_HEADER_SIZE + body.length);
  out.set(encoder.encode(CONTROL_MAGIC), 0);
  new DataView(out.buffer).setUint32(4, body.length, false);
  out.set(body, CONTROL_HEADER_SIZE);
  return out;
}

type Parsed =
  | { status: "need_more" }
  | { status: "bad"; skip: number }
  | { status: "ok"; message: Message; size: number };

function parseAt(bytes: Uint8Array, offset: number): Parsed {
  const avail = bytes.length - offset;
  if (avail < 4) return { status: "need_more" };
  const magic = magicAt(bytes, offset);
  const view = new DataView(bytes.buffer, bytes.byteOffset + offset, avail);

  if (magic === FRAME_MAGIC) {
    if (avail < FRAME_HEADER_SIZE) return { status: "need_more" };
    const streamId = view.getUint32(4, false);
    const frameIndexBig = view.getBigUint64(8, false);
    const width = view.getUint16(16, false);
    const height = view.getUint16(18, false);
    const pixelFormat = view.getUint8(20);
    const payloadLength = view.getUint32(21, false);
    if (
      frameIndexBig > BigInt(Number.MAX_SAFE_INTEGER) ||
      payloadLength > MAX_PAYLOAD ||
      payloadLength !== width * height ||
      pixelFormat !== PIXEL_FORMAT_GRAY8
    ) {
      return { status: "bad", skip: 1 };
    }
    if (avail < FRAME_HEADER_SIZE + payloadLength) return { status: "need_more" };
    const start = offset + FRAME_HEADER_SIZE;
    return {
      status: "ok",
      size: FRAME_HEADER_SIZE + payloadLength,
      message: {
        kind: "frame",
        streamId,
        frameIndex: Number(frameIndexBig),
        width,
        height,
        pixelFormat,
        payload: bytes.slice(start, start + payloadLength),
      },
    };
  }

  if (magic === CONTROL_MAGIC) {
    if (avail < CONTROL_HEADER_SIZE) return { status: "need_more" };
    const length = view.getUint32(4, false);
    if (length > MAX_PAYLOAD) return { status: "bad", skip: 1 };
    if (avail < CONTROL_HEADER_SIZE + length) return { status: "need_more" };
    const start = offset + CONTROL_HEADER_SIZE;
    try {
      const record = JSON.parse(decoder.decode(bytes.subarray(start, start + length)));
      if (typeof record !== "object" || record === null || Array.isArray(record)) {
        return { status: "bad", skip: 1 };
      }
      return {
        status: "ok",
        size: CONTROL_HEADER_SIZE + length,
        message: { kind: "control", record },
      };
    } catch {
      return { status: "bad", skip: 1 };
    }
  }

  return { status: "bad", skip: 1 };
}

/**
 * Incremental parser. Feed arbitrary chunkings of the byte stream; complete
 * messages come out in order. Garbage is skipped byte by byte until a valid
 * message parses, with the damage tallied in badBytes/badMessages.
 */
export class StreamDecoder {
  private buffer = new Uint8Array(0);
  badBytes = 0;
  badMessages = 0;

  feed(chunk: Uint8Array): Message[] {
    if (this.buffer.length === 0) {
      this.buffer = chunk.slice();
    } else {
      const merged = new Uint8Array(this.buffer.length + chunk.length);
      merged.set(this.buffer, 0);
      merged.set(chunk, this.buffer.length);
      this.buffer = merged;
    }
    const out: Message[] = [];
    let offset = 0;
    let skipping = false;
    while (offset < this.buffer.length) {
      const parsed = parseAt(this.buffer, offset);
      if (parsed.status === "need_more") break;
      if (parsed.status === "bad") {
        if (!skipping) {
          this.badMessages += 1;
          skipping = true;
        }
        this.badBytes += parsed.skip;
        offset += parsed.skip;
        continue;
      }
      skipping = false;
      out.push(parsed.message);
      offset += parsed.size;
    }
    this.buffer = this.buffer.slice(offset);
    return out;
  }
}

/** Dequantize a gray8 payload to floats in [0, 1]. */
export function payloadToFloats(msg: FrameMessage): Float64Array {
  const out = new Float64Array(msg.payload.length);
  for (let i = 0; i < msg.payload.length; i++) {
    out[i] = (msg.payload[i] ?? 0) / 255;
  }
  return out;
}
