// Viewer-side camera model: gestures in, schema-shaped messages out.

import { CameraMessage, cameraMessageSchema } from "./protocol.js";

// Default envelope mirrors the training pose distribution; the expert
// toggle lifts it.
export const PITCH_LIMIT_DEG = 26;
export const YAW_LIMIT_DEG = 49;
export const DRAG_GAIN_DEG_PER_PX = 0.3;
export const RADIUS_STEP = 0.1;
export const RADIUS_MIN = 1.2;
export const RADIUS_MAX = 6.0;

export interface CameraValues {
  pitchDeg: number;
  yawDeg: number;
  rollDeg: number;
  radius: number;
  focal: number;
  width: number;
  height: number;
  samples: number;
  channel: "rgb" | "depth";
}

export const DEFAULT_CAMERA: CameraValues = {
  pitchDeg: 0,
  yawDeg: 0,
  rollDeg: 0,
  radius: 2.7,
  focal: 2.4,
  width: 128,
  height: 128,
  samples: 48,
  channel: "rgb"
};

const clampTo = (v: number, limit: number) => Math.max(-limit, Math.min(limit, v));

export class CameraState {
  values: CameraValues;
  clamped = true;
  private nextFrameId = 1;

  constructor(initial: Partial<CameraValues> = {}) {
    this.values = { ...DEFAULT_CAMERA, ...initial };
  }

  drag(dxPx: number, dyPx: number): void {
    this.values.yawDeg += dxPx * DRAG_GAIN_DEG_PER_PX;
    this.values.pitchDeg += dyPx * DRAG_GAIN_DEG_PER_PX;
    if (this.clamped) {
      this.values.yawDeg = clampTo(this.values.yawDeg, YAW_LIMIT_DEG);
      this.values.pitchDeg = clampTo(this.values.pitchDeg, PITCH_LIMIT_DEG);
    }
  }

  wheel(notches: number): void {
    // wheel up (negative deltaY convention: positive notches zoom in)
    this.values.radius = Math.min(
      RADIUS_MAX,
      Math.max(RADIUS_MIN, this.values.radius - notches * RADIUS_STEP)
    );
  }

  setRoll(deg: number): void {
    this.values.rollDeg = deg;
  }

  setFocal(focal: number): void {
    this.values.focal = Math.max(0.2, focal);
  }

  setSamples(samples: number): void {
    this.values.samples = Math.max(1, Math.round(samples));
  }

  toggleChannel(): void {
    this.values.channel = this.values.channel === "rgb" ? "depth" : "rgb";
  }

  setClamped(clamped: boolean): void {
    this.clamped = clamped;
    if (clamped) {
      this.values.yawDeg = clampTo(this.values.yawDeg, YAW_LIMIT_DEG);
      this.values.pitchDeg = clampTo(this.values.pitchDeg, PITCH_LIMIT_DEG);
    }
  }

  // Builds and validates the next outgoing message; throws if the state
  // somehow violates the wire schema.
  nextMessage(): CameraMessage {
    const v = this.values;
    const message = {
      pitch_deg: v.pitchDeg,
      yaw_deg: v.yawDeg,
      roll_deg: v.rollDeg,
      radius: v.radius,
      focal: v.focal,
      width: v.width,
      height: v.height,
      frame_id: this.nextFrameId++,
      channel: v.channel,
      samples: v.samples,
      samples_fine: 0
    };
    return cameraMessageSchema.parse(message);
  }
}
