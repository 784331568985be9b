import { describe, expect, it } from "vitest";

import {
  CameraState, DRAG_GAIN_DEG_PER_PX, PITCH_LIMIT_DEG, RADIUS_MIN, YAW_LIMIT_DEG
} from "../src/camera-state.js";
import { cameraMessageSchema } from "../src/protocol.js";

describe("drag mapping", () => {
  it("horizontal drag changes yaw only", () => {
    const cam = new CameraState();
    cam.drag(40, 0);
    expect(cam.values.yawDeg).toBeCloseTo(40 * DRAG_GAIN_DEG_PER_PX);
    expect(cam.values.pitchDeg).toBe(0);
  });

  it("clamped mode pins yaw at the pose envelope", () => {
    const cam = new CameraState();
    cam.drag(10000, 10000);
    expect(cam.values.yawDeg).toBe(YAW_LIMIT_DEG);
    expect(cam.values.pitchDeg).toBe(PITCH_LIMIT_DEG);
    cam.drag(-100000, -100000);
    expect(cam.values.yawDeg).toBe(-YAW_LIMIT_DEG);
  });

  it("expert toggle lifts the clamp and re-applies it", () => {
    const cam = new CameraState();
    cam.setClamped(false);
    cam.drag(1000, 0);
    expect(cam.values.yawDeg).toBeGreaterThan(YAW_LIMIT_DEG);
    cam.setClamped(true);
    expect(cam.values.yawDeg).toBe(YAW_LIMIT_DEG);
  });
});

describe("wheel mapping", () => {
  it("zooming in decreases radius monotonically to its floor", () => {
    const cam = new CameraState();
    let previous = cam.values.radius;
    for (let i = 0; i < 40; i++) {
      cam.wheel(1);
      expect(cam.values.radius).toBeLessThanOrEqual(previous);
      previous = cam.values.radius;
    }
    expect(cam.values.radius).toBe(RADIUS_MIN);
  });
});

describe("outgoing messages", () => {
  it("always validate against the wire schema", () => {
    const cam = new CameraState();
    cam.drag(25, -12);
    cam.wheel(2);
    cam.setRoll(7);
    cam.toggleChannel();
    for (let i = 0; i < 5; i++) {
      expect(() => cameraMessageSchema.parse(cam.nextMessage())).not.toThrow();
    }
  });

  it("frame ids increase per message", () => {
    const cam = new CameraState();
    const a = cam.nextMessage().frame_id;
    const b = cam.nextMessage().frame_id;
    expect(b).toBe(a + 1);
  });

  it("depth toggle switches the requested channel", () => {
    const cam = new CameraState();
    expect(cam.nextMessage().channel).toBe("rgb");
    cam.toggleChannel();
    expect(cam.nextMessage().channel).toBe("depth");
  });
});
