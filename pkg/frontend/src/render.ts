/**
 * Frame rendering: gray8 payload to an RGBA pixel buffer.
 *
 * Nearest-neighbor upscaling keeps the toy pixels inspectable at display
 * size. The output is plain data (width, height, RGBA bytes) so the same
 * renderer serves a browser canvas via putImageData and the test harness
 * via direct inspection; no DOM types are required here.
 */

import type { FrameMessage } from "./protocol.js";

export interface RenderedImage {
  width: number;
  height: number;
  /** RGBA, row-major, 4 bytes per pixel. */
  pixels: Uint8ClampedArray<ArrayBuffer>;
}

export function renderFrame(msg: FrameMessage, scale: number): RenderedImage {
  if (!Number.isInteger(scale) || scale < 1) {
    throw new RangeError(`scale must be a positive integer, got ${scale}`);
  }
  const w = msg.width * scale;
  const h = msg.height * scale;
  const pixels = new Uint8ClampedArray(w * h * 4);
  for (let y = 0; y < h; y++) {
    const srcRow = Math.floor(y / scale) * msg.width;
    for (let x = 0; x < w; x++) {
      const v = msg.payload[srcRow + Math.floor(x / scale)] ?? 0;
      const o = (y * w + x) * 4;
      pixels[o] = v;
      pixels[o + 1] = v;
      pixels[o + 2] = v;
      pixels[o + 3] = 255;
    }
  }
  return { width: w, height: h, pixels };
}

/** Centroid (cy, cx) of a gray frame, or null for an empty frame. */
export function centroid(msg: FrameMessage): [number, number] | null {
  let mass = 0;
  let my = 0;
  let mx = 0;
  for (let y = 0; y < msg.height; y++) {
    for (let x = 0; x < msg.width; x++) {
      const v = msg.payload[y * msg.width + x] ?? 0;
      mass += v;
      my += v * y;
      mx += v * x;
    }
  }
  if (mass <= 0) return null;
  return [my / mass, mx / mass];
}
