// Wire protocol of the frame service: camera messages out, binary frames in.

import { z } from "zod";

// Matches the server's camera JSON schema exactly, plus the stream-only
// keys (frame_id, channel, samples). Every message is validated before it
// leaves the client.
export const cameraMessageSchema = z
  .object({
    pitch_deg: z.number().finite(),
    yaw_deg: z.number().finite(),
    roll_deg: z.number().finite(),
    radius: z.number().positive(),
    focal: z.number().positive(),
    cx: z.number().finite().optional(),
    cy: z.number().finite().optional(),
    width: z.number().int().min(1),
    height: z.number().int().min(1),
    near: z.number().optional(),
    far: z.number().optional(),
    frame_id: z.number().int().nonnegative(),
    channel: z.enum(["rgb", "depth"]),
    samples: z.number().int().min(1),
    samples_fine: z.number().int().min(0).optional()
  })
  .strict();

export type CameraMessage = z.infer<typeof cameraMessageSchema>;

export const FRAME_HEADER_BYTES = 16;
export const KIND_RGB = 1;
export const KIND_DEPTH = 2;
export const KIND_ERROR = 0xff;

export interface Frame {
  frameId: number;
  width: number;
  height: number;
  kind: number;
  skipped: number;
  payload: Uint8Array;
}

// Header layout (little-endian):
// magic "FRME" | frame_id u32 | width u16 | height u16 | kind u8 |
// skipped u16 | pad u8
export function decodeFrame(data: ArrayBuffer): Frame {
  if (data.byteLength < FRAME_HEADER_BYTES) {
    throw new Error(`frame too short: ${data.byteLength} bytes`);
  }
  const view = new DataView(data);
  const magic = String.fromCharCode(view.getUint8(0), view.getUint8(1),
    view.getUint8(2), view.getUint8(3));
  if (magic !== "FRME") {
    throw new Error(`bad frame magic ${JSON.stringify(magic)}`);
  }
  return {
    frameId: view.getUint32(4, true),
    width: view.getUint16(8, true),
    height: view.getUint16(10, true),
    kind: view.getUint8(12),
    skipped: view.getUint16(13, true),
    payload: new Uint8Array(data, FRAME_HEADER_BYTES)
  };
}

export function errorReason(frame: Frame): string {
  return new TextDecoder().decode(frame.payload);
}

// Grayscale PFM ("Pf", negative scale = little-endian, bottom-up rows)
// into row-major float32, for depth display.
export function decodePfm(payload: Uint8Array): { width: number; height: number; values: Float32Array } {
  const text = new TextDecoder("latin1").decode(payload.subarray(0, 64));
  const match = /^Pf\n(\d+) (\d+)\n(-?[\d.eE+]+)\n/.exec(text);
  if (!match) throw new Error("malformed PFM header");
  const width = parseInt(match[1], 10);
  const height = parseInt(match[2], 10);
  const little = parseFloat(match[3]) < 0;
  const offset = match[0].length;
  const view = new DataView(payload.buffer, payload.byteOffset + offset);
  const values = new Float32Array(width * height);
  for (let row = 0; row < height; row++) {
    const src = height - 1 - row; // bottom-up storage
    for (let col = 0; col < width; col++) {
      values[row * width + col] = view.getFloat32((src * width + col) * 4, little);
    }
  }
  return { width, height, values };
}
