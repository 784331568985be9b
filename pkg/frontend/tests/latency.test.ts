import { describe, expect, it } from "vitest";

import { LatencyTracker } from "../src/latency.js";

function trackerWithFakeClock() {
  let now = 0;
  const tracker = new LatencyTracker(120, () => now);
  return { tracker, advance: (ms: number) => { now += ms; } };
}

describe("latency tracker", () => {
  it("measures send-to-receive per frame id", () => {
    const { tracker, advance } = trackerWithFakeClock();
    tracker.sent(1);
    advance(42);
    expect(tracker.received(1)).toBe(42);
    expect(tracker.last).toBe(42);
  });

  it("ignores frames it never saw sent", () => {
    const { tracker } = trackerWithFakeClock();
    expect(tracker.received(99)).toBeUndefined();
    expect(tracker.count).toBe(0);
  });

  it("keeps a 120-frame window with p50/p95", () => {
    const { tracker, advance } = trackerWithFakeClock();
    for (let i = 0; i < 150; i++) {
      tracker.sent(i);
      advance(i);
      tracker.received(i);
    }
    expect(tracker.count).toBe(120);
    // window holds latencies 30..149
    expect(tracker.p50).toBeGreaterThanOrEqual(88);
    expect(tracker.p50).toBeLessThanOrEqual(91);
    expect(tracker.p95).toBeGreaterThanOrEqual(142);
    expect(tracker.p95).toBeLessThanOrEqual(145);
  });
});
